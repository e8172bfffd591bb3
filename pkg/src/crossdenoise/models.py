"""GMF, NeuMF and CDAE backbones with hand-written gradients.

Every model exposes ``forward_backward(users, items, labels, weights, rng)``
returning ``(batch_loss, per_sample_losses, grads)`` where the batch loss is
``mean(weights * bce)`` and weights are treated as constants.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp

from crossdenoise import nn
from crossdenoise.nn import DenseLayer, bce_loss, dense_backward, dense_forward, sigmoid


class Backbone:
    kind: str = ""

    def __init__(self, num_users: int, num_items: int, dim: int):
        self.num_users = num_users
        self.num_items = num_items
        self.dim = dim
        self.params: dict[str, np.ndarray] = {}

    @property
    def dims(self) -> dict:
        return {"num_users": self.num_users, "num_items": self.num_items, "dim": self.dim}

    def _check(self, users, items):
        users = np.asarray(users, dtype=np.int64)
        items = np.asarray(items, dtype=np.int64)
        if users.size and (users.min() < 0 or users.max() >= self.num_users):
            raise IndexError("user index out of range")
        if items.size and (items.min() < 0 or items.max() >= self.num_items):
            raise IndexError("item index out of range")
        return users, items

    def predict(self, users, items, rng=None):
        users, items = self._check(users, items)
        return sigmoid(self._logits(users, items, rng)[0])

    def score_users(self, users) -> np.ndarray:
        """Full-catalog scores (len(users), num_items), deterministic."""
        users = np.asarray(users, dtype=np.int64)
        items = np.arange(self.num_items)
        uu = np.repeat(users, self.num_items)
        ii = np.tile(items, len(users))
        return self.predict(uu, ii).reshape(len(users), self.num_items)

    def forward_backward(self, users, items, labels, weights, rng=None):
        users, items = self._check(users, items)
        labels = np.asarray(labels, dtype=np.float64)
        weights = np.asarray(weights, dtype=np.float64)
        logits, cache = self._logits(users, items, rng)
        y_hat = sigmoid(logits)
        per_sample = bce_loss(y_hat, labels)
        batch = len(users)
        loss = float(np.mean(weights * per_sample)) if batch else 0.0
        dlogit = weights * nn.bce_logit_grad(y_hat, labels) / max(batch, 1)
        grads = self._backward(users, items, cache, dlogit)
        return loss, per_sample, grads

    def copy_params(self) -> dict:
        return {k: v.copy() for k, v in self.params.items()}

    def _logits(self, users, items, rng):
        raise NotImplementedError

    def _backward(self, users, items, cache, dlogit):
        raise NotImplementedError


def _scatter_rows(shape, idx, rows):
    g = np.zeros(shape)
    np.add.at(g, idx, rows)
    return g


class GMF(Backbone):
    """sigmoid(h . (p_u * q_i))."""

    kind = "gmf"

    def __init__(self, num_users, num_items, dim=32, rng=None):
        super().__init__(num_users, num_items, dim)
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params = {
            "user_emb": nn.normal_embedding(rng, num_users, dim),
            "item_emb": nn.normal_embedding(rng, num_items, dim),
            "h": nn.xavier_uniform(rng, 1, dim)[0],
        }

    def _logits(self, users, items, rng):
        p = self.params["user_emb"][users]
        q = self.params["item_emb"][items]
        return (p * q) @ self.params["h"], (p, q)

    def _backward(self, users, items, cache, dlogit):
        p, q = cache
        h = self.params["h"]
        d = dlogit[:, None]
        return {
            "user_emb": _scatter_rows(self.params["user_emb"].shape, users, d * h * q),
            "item_emb": _scatter_rows(self.params["item_emb"].shape, items, d * h * p),
            "h": (d * p * q).sum(axis=0),
        }

    def score_users(self, users):
        users = np.asarray(users, dtype=np.int64)
        P = self.params["user_emb"][users] * self.params["h"]
        return sigmoid(P @ self.params["item_emb"].T)


class NeuMF(Backbone):
    """GMF branch and an MLP tower [2d -> 2d -> d -> d/2] fused by one vector."""

    kind = "neumf"

    def __init__(self, num_users, num_items, dim=32, rng=None):
        if dim % 2:
            raise ValueError("NeuMF needs an even embedding size")
        super().__init__(num_users, num_items, dim)
        rng = rng if rng is not None else np.random.default_rng(0)
        sizes = [(2 * dim, 2 * dim), (2 * dim, dim), (dim, dim // 2)]
        self.params = {
            "gmf_user": nn.normal_embedding(rng, num_users, dim),
            "gmf_item": nn.normal_embedding(rng, num_items, dim),
            "mlp_user": nn.normal_embedding(rng, num_users, dim),
            "mlp_item": nn.normal_embedding(rng, num_items, dim),
        }
        for k, (n_in, n_out) in enumerate(sizes):
            self.params[f"mlp{k}_w"] = nn.xavier_uniform(rng, n_out, n_in)
            self.params[f"mlp{k}_b"] = np.zeros(n_out)
        fan = dim + dim // 2
        self.params["fusion"] = rng.uniform(-np.sqrt(6.0 / (fan + 1)), np.sqrt(6.0 / (fan + 1)), size=fan)

    def _layers(self):
        return [DenseLayer(self.params[f"mlp{k}_w"], self.params[f"mlp{k}_b"], "relu") for k in range(3)]

    def _logits(self, users, items, rng):
        P = self.params
        pg, qg = P["gmf_user"][users], P["gmf_item"][items]
        x = np.concatenate([P["mlp_user"][users], P["mlp_item"][items]], axis=1)
        caches = []
        for layer in self._layers():
            x, c = dense_forward(layer, x)
            caches.append(c)
        feat = np.concatenate([pg * qg, x], axis=1)
        return feat @ P["fusion"], (pg, qg, feat, caches)

    def _backward(self, users, items, cache, dlogit):
        P = self.params
        pg, qg, feat, caches = cache
        d = self.dim
        grads = {"fusion": dlogit @ feat}
        dfeat = dlogit[:, None] * P["fusion"]
        dgmf, dx = dfeat[:, :d], dfeat[:, d:]
        for k in reversed(range(3)):
            layer = DenseLayer(P[f"mlp{k}_w"], P[f"mlp{k}_b"], "relu")
            dx, dw, db = dense_backward(layer, caches[k], dx)
            grads[f"mlp{k}_w"] = dw
            grads[f"mlp{k}_b"] = db
        grads["gmf_user"] = _scatter_rows(P["gmf_user"].shape, users, dgmf * qg)
        grads["gmf_item"] = _scatter_rows(P["gmf_item"].shape, items, dgmf * pg)
        grads["mlp_user"] = _scatter_rows(P["mlp_user"].shape, users, dx[:, :d])
        grads["mlp_item"] = _scatter_rows(P["mlp_item"].shape, items, dx[:, d:])
        return grads

    def score_users(self, users, chunk=256):
        users = np.asarray(users, dtype=np.int64)
        out = np.empty((len(users), self.num_items))
        items = np.arange(self.num_items)
        for s in range(0, len(users), chunk):
            part = users[s : s + chunk]
            uu = np.repeat(part, self.num_items)
            ii = np.tile(items, len(part))
            out[s : s + len(part)] = sigmoid(self._logits(uu, ii, None)[0]).reshape(len(part), -1)
        return out


class CDAE(Backbone):
    """Denoising autoencoder over user rows with a per-user input node.

    Scores for a batch of (u, i) samples are the decoder outputs at item i of
    user u's reconstructed row. The input row is the user's training positives,
    corrupted with inverted dropout when an `rng` is given.
    """

    kind = "cdae"

    def __init__(self, num_users, num_items, dim=32, rng=None, corruption_rate=0.5, train_rows=None):
        super().__init__(num_users, num_items, dim)
        if not 0.0 <= corruption_rate < 1.0:
            raise ValueError("corruption_rate must lie in [0, 1)")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.corruption_rate = corruption_rate
        self.params = {
            "enc_w": nn.xavier_uniform(rng, dim, num_items),
            "enc_b": np.zeros(dim),
            "user_node": nn.normal_embedding(rng, num_users, dim),
            "dec_w": nn.xavier_uniform(rng, num_items, dim),
            "dec_b": np.zeros(num_items),
        }
        self.set_train_rows(train_rows)

    def set_train_rows(self, rows):
        if rows is None:
            rows = sp.csr_matrix((self.num_users, self.num_items))
        self.rows = sp.csr_matrix(rows, dtype=np.float64)

    @classmethod
    def rows_from(cls, train) -> sp.csr_matrix:
        data = np.ones(len(train))
        m = sp.csr_matrix((data, (train.users, train.items)), shape=(train.num_users, train.num_items))
        m.data[:] = 1.0
        return m

    def _hidden(self, uniq, rng):
        x = self.rows[uniq].toarray()
        if rng is not None and self.corruption_rate > 0:
            keep = rng.random(x.shape) >= self.corruption_rate
            x = x * keep / (1.0 - self.corruption_rate)
        P = self.params
        h = sigmoid(x @ P["enc_w"].T + P["enc_b"] + P["user_node"][uniq])
        return x, h

    def _logits(self, users, items, rng):
        uniq, inv = np.unique(users, return_inverse=True)
        x, h = self._hidden(uniq, rng)
        hs = h[inv]
        logits = np.einsum("bd,bd->b", hs, self.params["dec_w"][items]) + self.params["dec_b"][items]
        return logits, (uniq, inv, x, h)

    def _backward(self, users, items, cache, dlogit):
        P = self.params
        uniq, inv, x, h = cache
        hs = h[inv]
        d = dlogit[:, None]
        dh = np.zeros_like(h)
        np.add.at(dh, inv, d * P["dec_w"][items])
        da = dh * h * (1.0 - h)
        node = np.zeros_like(P["user_node"])
        node[uniq] = da
        return {
            "dec_w": _scatter_rows(P["dec_w"].shape, items, d * hs),
            "dec_b": np.bincount(items, weights=dlogit, minlength=self.num_items).astype(np.float64),
            "enc_w": da.T @ x,
            "enc_b": da.sum(axis=0),
            "user_node": node,
        }

    def score_users(self, users):
        users = np.asarray(users, dtype=np.int64)
        _, h = self._hidden(users, None)
        return sigmoid(h @ self.params["dec_w"].T + self.params["dec_b"])


MODELS = {"gmf": GMF, "neumf": NeuMF, "cdae": CDAE}


def build_model(kind, num_users, num_items, dim=32, rng=None, train=None, **kw):
    if kind not in MODELS:
        raise ValueError(f"unknown model kind {kind!r}")
    model = MODELS[kind](num_users, num_items, dim, rng=rng, **kw)
    if kind == "cdae" and train is not None:
        model.set_train_rows(CDAE.rows_from(train))
    return model


def weighted_batch_loss(model: Backbone, users, items, labels, weights, rng=None):
    """mean(weights * bce) with raw per-sample losses and parameter gradients."""
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != np.shape(users):
        raise ValueError("weights must align with the batch")
    if np.any(weights < 0):
        raise ValueError("sample weights must be nonnegative")
    return model.forward_backward(users, items, labels, weights, rng)


def save_model(path, model: Backbone) -> None:
    dims = dict(model.dims)
    if isinstance(model, CDAE):
        dims["corruption_rate"] = model.corruption_rate
    nn.save_params(path, model.kind, dims, model.params)


def load_model(path, train=None) -> Backbone:
    kind, dims, params = nn.load_params(path)
    kw = {}
    if kind == "cdae":
        kw["corruption_rate"] = dims.get("corruption_rate", 0.5)
    model = build_model(kind, dims["num_users"], dims["num_items"], dims["dim"], train=train, **kw)
    model.params = params
    return model
