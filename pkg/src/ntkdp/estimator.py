"""scikit-learn style wrapper around the completion loop."""

from __future__ import annotations

from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .grid import MaskedTsdf, SparseGrid
from .net import DEFAULT_ENCODERS, DeepPriorNet, NetworkConfig
from .surface import TriMesh, marching_cubes
from .trainer import TrainConfig, make_instances, train


class DeepPriorCompleter(BaseEstimator):
    """Fits a fresh deep prior to one partial TSDF and returns its completion.

    ``fit`` takes a single :class:`MaskedTsdf`; there is no notion of a training
    set, so ``predict`` ignores its argument and returns the fitted shape.
    """

    def __init__(self, max_epochs=2000, update_interval=250, dilations=4, eta=0.5, w1=0.001, w2=0.1,
                 lr=2e-3, augmentations=23, batch_augmentations=3, hierarchy=True, laplacian=True,
                 augment=True, encoder_sizes=DEFAULT_ENCODERS, noise_channels=32, seed=0):
        self.max_epochs = max_epochs
        self.update_interval = update_interval
        self.dilations = dilations
        self.eta = eta
        self.w1 = w1
        self.w2 = w2
        self.lr = lr
        self.augmentations = augmentations
        self.batch_augmentations = batch_augmentations
        self.hierarchy = hierarchy
        self.laplacian = laplacian
        self.augment = augment
        self.encoder_sizes = encoder_sizes
        self.noise_channels = noise_channels
        self.seed = seed

    def _configs(self) -> tuple[TrainConfig, NetworkConfig]:
        tc = TrainConfig(
            max_epochs=self.max_epochs, update_interval=self.update_interval, dilations=self.dilations,
            eta=self.eta, w1=self.w1, w2=self.w2, lr=self.lr, augmentations=self.augmentations,
            batch_augmentations=self.batch_augmentations, seed=self.seed, hierarchy=self.hierarchy,
            laplacian=self.laplacian, augment=self.augment,
        )
        nc = NetworkConfig(encoder_sizes=self.encoder_sizes, noise_channels=self.noise_channels,
                           hierarchy=self.hierarchy)
        return tc, nc

    def fit(self, X: MaskedTsdf, y=None) -> "DeepPriorCompleter":
        if not isinstance(X, MaskedTsdf):
            raise TypeError("fit expects a MaskedTsdf")
        tc, nc = self._configs()
        self.network_ = DeepPriorNet(nc, seed=self.seed)
        self.result_ = train(make_instances(X, tc), self.network_, tc)
        self.log_ = self.result_.log
        self.completed_ = self.result_.completed_tsdf()
        return self

    def predict(self, X=None) -> SparseGrid:
        """Raw network output on the final completion domain."""
        check_is_fitted(self, "result_")
        return self.result_.completed

    def transform(self, X=None) -> MaskedTsdf:
        check_is_fitted(self, "completed_")
        return self.completed_

    def fit_transform(self, X: MaskedTsdf, y=None) -> MaskedTsdf:
        return self.fit(X).transform()

    def mesh(self) -> TriMesh:
        check_is_fitted(self, "completed_")
        return marching_cubes(self.completed_.values)
