"""Scikit-learn style front end: a sparsely trained MLP classifier."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset
from .nets import init_model, make_mlp_specs, predict_logits
from .pruning import SparsitySchedule
from .training import ConstantLR, StepDecayLR, Strategy, TrainConfig, run_training, steps_per_epoch


class SparseMLPClassifier(ClassifierMixin, BaseEstimator):
    """MLP classifier trained sparse in one pass via pruning with feedback.

    Gradients are evaluated at the pruned network and applied to a jointly
    maintained dense one, so prematurely pruned weights can reactivate; the
    rival strategies from the pruning literature are available through the
    `strategy` parameter for comparison.

    Parameters
    ----------
    hidden_layer_sizes : tuple of int, default (64, 64)
        Widths of the relu hidden layers.
    strategy : str, default "dpf"
        One of "dpf", "dense", "before_training", "one_shot_ft", "incremental".
    target_sparsity : float, default 0.9
        Final fraction of prunable weights forced to zero.
    ramp_fraction : float, default 0.75
        Fraction of training steps over which the sparsity target ramps up.
    epochs, batch_size, learning_rate, lr_milestones, lr_decay, momentum,
    weight_decay : usual SGD knobs; the learning rate drops by `lr_decay`
        at the given fractions of total steps (Nesterov momentum).
    reparam_period : int, default 16
        Optimizer steps between mask refreshes.
    scope : str, default "global"
        "global" ranks all prunable weights together, "layerwise" per layer.
    saliency : str, default "magnitude"
        Mask criterion for strategy "before_training" ("magnitude" or "snip").
    monotone : bool, default False
        For strategy "incremental": masks may only shrink.
    finetune_epochs : int, default 0
        Extra fixed-mask epochs after training.
    random_state : int, default 0
        Seed for initialization and batch shuffling.

    Attributes
    ----------
    classes_ : ndarray of the class labels seen in fit.
    sparsity_achieved_ : fraction of prunable weights that are exactly zero.
    mask_ : the final binary mask.
    records_ : per-epoch evaluation records of the run.
    """

    def __init__(
        self,
        hidden_layer_sizes=(64, 64),
        strategy="dpf",
        target_sparsity=0.9,
        initial_sparsity=0.0,
        ramp_fraction=0.75,
        epochs=40,
        batch_size=64,
        learning_rate=0.1,
        lr_milestones=(0.5, 0.75),
        lr_decay=10.0,
        momentum=0.9,
        weight_decay=0.0,
        reparam_period=16,
        scope="global",
        saliency="magnitude",
        monotone=False,
        finetune_epochs=0,
        random_state=0,
    ):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.strategy = strategy
        self.target_sparsity = target_sparsity
        self.initial_sparsity = initial_sparsity
        self.ramp_fraction = ramp_fraction
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_milestones = lr_milestones
        self.lr_decay = lr_decay
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.reparam_period = reparam_period
        self.scope = scope
        self.saliency = saliency
        self.monotone = monotone
        self.finetune_epochs = finetune_epochs
        self.random_state = random_state

    def _train_config(self, n_train: int) -> TrainConfig:
        spe = steps_per_epoch(n_train, self.batch_size)
        total = spe * self.epochs
        if self.lr_milestones:
            lr = StepDecayLR(self.learning_rate, tuple(int(f * total) for f in self.lr_milestones), self.lr_decay)
        else:
            lr = ConstantLR(self.learning_rate)
        schedule = SparsitySchedule(
            s_i=self.initial_sparsity,
            s_f=self.target_sparsity,
            t_0=0,
            ramp_steps=max(1, int(self.ramp_fraction * total)),
            update_every=self.reparam_period,
        )
        return TrainConfig(
            strategy=Strategy(self.strategy, self.saliency, self.monotone),
            lr=lr,
            momentum=self.momentum,
            weight_decay=self.weight_decay,
            batch_size=self.batch_size,
            epochs=self.epochs,
            reparam_period=self.reparam_period,
            schedule=schedule,
            scope=self.scope,
            seed=self.random_state,
            finetune_epochs=self.finetune_epochs,
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_, encoded = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        data = Dataset(
            np.ascontiguousarray(X, dtype=np.float64),
            encoded.astype(np.int64),
            num_classes=int(self.classes_.size),
        )
        dims = [self.n_features_in_, *self.hidden_layer_sizes, int(self.classes_.size)]
        model = init_model(make_mlp_specs(dims), self.random_state)
        result = run_training(model, data, self._train_config(data.n_train))
        self.model_ = model
        self.dense_params_ = result.dense
        self.sparse_params_ = result.sparse
        self.mask_ = result.mask
        self.records_ = result.records
        self.sparsity_achieved_ = result.mask.sparsity
        return self

    def decision_function(self, X):
        check_is_fitted(self, "sparse_params_")
        X = check_array(X)
        # Inference runs on the sparse model.
        return predict_logits(self.model_, self.sparse_params_, np.asarray(X, dtype=np.float64))

    def predict_proba(self, X):
        logits = self.decision_function(X)
        shifted = logits - logits.max(axis=1, keepdims=True)
        expz = np.exp(shifted)
        return expz / expz.sum(axis=1, keepdims=True)

    def predict(self, X):
        logits = self.decision_function(X)
        return self.classes_[logits.argmax(axis=1)]
