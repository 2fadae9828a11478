"""scikit-learn style façade: federated training on (X, y) split across simulated clients."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .datagen import Dataset
from .encoder import forward
from .objectives import ObjectiveConfig, predict_probs
from .simulator import RunConfig, encoder_with_deltas, run_training


class FedAlignClassifier(ClassifierMixin, TransformerMixin, BaseEstimator):
    """Partition the training set across ``num_clients`` simulated clients and run
    federated rounds; prediction uses the aggregated global image encoder against
    the trained class text features.

    Round metrics are computed on the training data itself and stored in
    ``history_``.
    """

    def __init__(self, num_clients=5, partition="dir", alpha=0.1, classes_per_client=2,
                 global_rounds=10, local_epochs=1, mu=0.1, tau=2.66, lr=1e-3, batch_size=64,
                 rank=4, lora_start=2, boundary=9, ex_query=True, num_blocks=12,
                 d_hidden=32, d_embed=16, random_state=0, n_jobs=1):
        self.num_clients = num_clients
        self.partition = partition
        self.alpha = alpha
        self.classes_per_client = classes_per_client
        self.global_rounds = global_rounds
        self.local_epochs = local_epochs
        self.mu = mu
        self.tau = tau
        self.lr = lr
        self.batch_size = batch_size
        self.rank = rank
        self.lora_start = lora_start
        self.boundary = boundary
        self.ex_query = ex_query
        self.num_blocks = num_blocks
        self.d_hidden = d_hidden
        self.d_embed = d_embed
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _run_config(self, n_features, n_classes) -> RunConfig:
        seed = 0 if self.random_state is None else int(self.random_state)
        return RunConfig(
            global_rounds=self.global_rounds, num_clients=self.num_clients,
            local_epochs=self.local_epochs, tau=self.tau, mu=self.mu, lr=self.lr,
            batch_size=self.batch_size, rank=self.rank, lora_start=self.lora_start,
            boundary=self.boundary, ex_query=self.ex_query, partition=self.partition,
            alpha=self.alpha, classes_per_client=self.classes_per_client,
            num_classes=n_classes, num_blocks=self.num_blocks, d_in=n_features,
            d_hidden=self.d_hidden, d_embed=self.d_embed, seed=seed, n_jobs=self.n_jobs,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, y_enc = np.unique(y, return_inverse=True)
        if self.classes_.shape[0] < 2:
            raise ValueError("need samples from at least two classes")
        self.n_features_in_ = X.shape[1]
        config = self._run_config(X.shape[1], self.classes_.shape[0])
        data = Dataset(X, y_enc, self.classes_.shape[0])
        result = run_training(config, data=(data, data))
        self.config_ = config
        self.history_ = [m.record() for m in result.metrics]
        self.encoder_ = encoder_with_deltas(result.world.image_backbone, result.global_deltas)
        self.text_features_ = result.text_feats
        return self

    def _check_X(self, X):
        check_is_fitted(self, "encoder_")
        X = check_array(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        return X

    def transform(self, X):
        """Unit-norm image embeddings from the global encoder."""
        X = self._check_X(X)
        return forward(self.encoder_, X)[0]

    def predict_proba(self, X):
        z = self.transform(X)
        return predict_probs(z, self.text_features_, ObjectiveConfig(tau=self.tau))

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]
