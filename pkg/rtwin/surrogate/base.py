from abc import ABC, abstractmethod

from rtwin.grid_core import PatientRecord, ScalarGrid
from rtwin.surrogate.features import FeatureStack
from rtwin.uq_metrics import DoseEnsemble


class DoseSurrogate(ABC):
    """
    Base class for dose surrogates: anatomy in, dose grid out, with an
    optional dropout seed for stochastic passes.
    """

    @abstractmethod
    def featurize(self, record: PatientRecord, reference: PatientRecord | None = None) -> FeatureStack:
        pass

    @abstractmethod
    def predict(self, features: FeatureStack, seed: int | None = None) -> ScalarGrid:
        pass

    @abstractmethod
    def ensemble(self, features: FeatureStack, seeds) -> DoseEnsemble:
        pass
