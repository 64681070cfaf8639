"""File formats: observation triples, feature tables, MovieLens
preparation, and the versioned text model format.

Parsers reject rather than coerce; every parse error names the file and
line.  External string ids live here, dense indices live in
:class:`~bire.types.Dataset`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, DataError, ModelFormatError
from .types import Dataset, Hyperparams, LatentState, intercept_features

MODEL_FORMAT_VERSION = 1
_SECTIONS = ("HEADER", "THETA", "ALPHA", "BETA", "U", "V")
_HEADER_KEYS = ("version", "mode", "M", "N", "r", "p_u", "p_v")
_THETA_KEYS = ("f_w", "g_w", "h_w", "G_w", "H_w", "sigma2_alpha",
               "sigma2_beta", "sigma2_u", "sigma2_v")
_MODES = ("var", "ars", "arsid")


@dataclass(frozen=True)
class Triple:
    """One parsed observation line, keeping its source line number."""

    line: int
    user: str
    item: str
    y: int
    covariates: tuple = ()


def _parse_real(text, path, lineno, what):
    try:
        value = float(text)
    except ValueError:
        raise DataError(f"{what} must be a decimal real, got {text!r}",
                        path=path, line=lineno) from None
    if not math.isfinite(value):
        raise DataError(f"{what} must be finite, got {text!r}",
                        path=path, line=lineno)
    return value


def load_triples(path) -> list[Triple]:
    """Read tab-separated `user item label [covariates...]` records.

    The label must be 0 or 1 and the optional event covariate count must
    be constant across the file.  An empty file is a valid empty dataset.
    """
    triples = []
    n_cov = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.rstrip("\n").split("\t")
            if len(parts) < 3:
                raise DataError(
                    f"expected user, item, label, got {len(parts)} field(s)",
                    path=path, line=lineno)
            user, item, label = parts[0], parts[1], parts[2]
            if not user or not item:
                raise DataError("empty user or item id",
                                path=path, line=lineno)
            if label not in ("0", "1"):
                raise DataError(f"label must be 0 or 1, got {label!r}",
                                path=path, line=lineno)
            covs = tuple(_parse_real(p, path, lineno, "event covariate")
                         for p in parts[3:])
            if n_cov is None:
                n_cov = len(covs)
            elif len(covs) != n_cov:
                raise DataError(
                    f"expected {n_cov} event covariate(s), found {len(covs)}",
                    path=path, line=lineno)
            triples.append(Triple(lineno, user, item, int(label), covs))
    return triples


@dataclass
class FeatureTable:
    """Covariate rows keyed by external id, intercept column included."""

    ids: tuple
    matrix: np.ndarray  # (len(ids), 1 + n), column 0 is the intercept
    _index: dict = field(init=False, repr=False)

    def __post_init__(self):
        self._index = {ident: k for k, ident in enumerate(self.ids)}

    @property
    def width(self) -> int:
        return int(self.matrix.shape[1])

    def __contains__(self, ident) -> bool:
        return ident in self._index

    def row(self, ident) -> np.ndarray:
        return self.matrix[self._index[ident]]


def load_features(path) -> FeatureTable:
    """Read `id f1 ... fn` rows (constant n) into a feature table."""
    ids, rows = [], []
    seen = set()
    width = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.rstrip("\n").split("\t")
            if not parts[0]:
                raise DataError("empty id", path=path, line=lineno)
            if parts[0] in seen:
                raise DataError(f"duplicate id {parts[0]!r}",
                                path=path, line=lineno)
            values = [_parse_real(p, path, lineno, "feature")
                      for p in parts[1:]]
            if width is None:
                width = len(values)
            elif len(values) != width:
                raise DataError(
                    f"expected {width} feature(s), found {len(values)}",
                    path=path, line=lineno)
            seen.add(parts[0])
            ids.append(parts[0])
            rows.append(values)
    matrix = intercept_features(
        len(ids), np.asarray(rows) if ids and width else None)
    return FeatureTable(tuple(ids), matrix)


def _feature_matrix(ids, table, kind):
    if table is None:
        return np.ones((len(ids), 1))
    rows = []
    for ident in ids:
        if ident not in table:
            raise DataError(f"{kind} {ident!r} has no feature row")
        rows.append(table.row(ident))
    if not rows:
        return np.ones((0, table.width))
    return np.vstack(rows)


def build_dataset(triples, user_table: FeatureTable | None = None,
                  item_table: FeatureTable | None = None) -> Dataset:
    """Assemble a dense-index dataset from parsed triples.

    Ids are numbered in first-appearance order.  Each id must have a
    feature row when a table is supplied; without one it gets the
    intercept-only covariate.
    """
    users, items = [], []
    user_map, item_map = {}, {}
    for t in triples:
        if t.user not in user_map:
            user_map[t.user] = len(users)
            users.append(t.user)
        if t.item not in item_map:
            item_map[t.item] = len(items)
            items.append(t.item)
    n = len(triples)
    user_idx = np.fromiter((user_map[t.user] for t in triples),
                           dtype=np.int64, count=n)
    item_idx = np.fromiter((item_map[t.item] for t in triples),
                           dtype=np.int64, count=n)
    y = np.fromiter((t.y for t in triples), dtype=np.float64, count=n)
    n_cov = len(triples[0].covariates) if triples else 0
    x_event = np.ones((n, 1 + n_cov))
    for k, t in enumerate(triples):
        x_event[k, 1:] = t.covariates
    return Dataset(user_idx, item_idx, y, x_event,
                   _feature_matrix(users, user_table, "user"),
                   _feature_matrix(items, item_table, "item"),
                   user_ids=users, item_ids=items)


def prepare_movielens(path, mode: str) -> tuple[Dataset, Dataset]:
    """Turn MovieLens `user::movie::rating::timestamp` lines into a
    time-ordered train/test pair.

    Records are stably sorted by timestamp, the first 75% (floor) train.
    Imbalanced mode marks only rating 1 positive; balanced marks ratings
    1-3.  Both datasets share one id space covering the whole file, so a
    model fitted on train scores every test row.
    """
    if mode not in ("balanced", "imbalanced"):
        raise ContractViolation(f"mode must be balanced or imbalanced, "
                                f"got {mode!r}")
    users, items, ratings, stamps = [], [], [], []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            parts = raw.rstrip("\n").split("::")
            if len(parts) != 4:
                raise DataError(
                    f"expected user::movie::rating::timestamp, "
                    f"got {len(parts)} field(s)", path=path, line=lineno)
            try:
                rating = int(parts[2])
                stamp = int(parts[3])
            except ValueError:
                raise DataError("rating and timestamp must be integers",
                                path=path, line=lineno) from None
            if not 1 <= rating <= 5:
                raise DataError(f"rating must be 1..5, got {rating}",
                                path=path, line=lineno)
            if not parts[0] or not parts[1]:
                raise DataError("empty user or movie id",
                                path=path, line=lineno)
            users.append(parts[0])
            items.append(parts[1])
            ratings.append(rating)
            stamps.append(stamp)
    order = np.argsort(np.asarray(stamps, dtype=np.int64), kind="stable")
    rating_arr = np.asarray(ratings, dtype=np.int64)[order]
    threshold = 1 if mode == "imbalanced" else 3
    y = (rating_arr <= threshold).astype(np.float64)

    user_list, item_list = [], []
    user_map, item_map = {}, {}
    user_idx = np.empty(order.size, dtype=np.int64)
    item_idx = np.empty(order.size, dtype=np.int64)
    for k, pos in enumerate(order):
        u, i = users[pos], items[pos]
        if u not in user_map:
            user_map[u] = len(user_list)
            user_list.append(u)
        if i not in item_map:
            item_map[i] = len(item_list)
            item_list.append(i)
        user_idx[k] = user_map[u]
        item_idx[k] = item_map[i]

    cut = math.floor(0.75 * order.size)
    uf = np.ones((len(user_list), 1))
    vf = np.ones((len(item_list), 1))

    def section(sl):
        return Dataset(user_idx[sl], item_idx[sl], y[sl],
                       np.ones((user_idx[sl].size, 1)), uf, vf,
                       user_ids=user_list, item_ids=item_list)

    return section(slice(None, cut)), section(slice(cut, None))


@dataclass
class ModelFile:
    """A fitted model keyed back to external ids, ready to serialize."""

    mode: str
    theta: Hyperparams
    delta: LatentState
    user_ids: tuple
    item_ids: tuple

    def __post_init__(self):
        if self.mode not in _MODES:
            raise ContractViolation(f"mode must be one of {_MODES}, "
                                    f"got {self.mode!r}")
        self.user_ids = tuple(str(u) for u in self.user_ids)
        self.item_ids = tuple(str(i) for i in self.item_ids)
        for ident in self.user_ids + self.item_ids:
            if (not ident or "\t" in ident or "\n" in ident
                    or (ident[0] == "[" and ident[-1] == "]")):
                raise ContractViolation(
                    f"id {ident!r} cannot be written unambiguously")
        if len(self.user_ids) != self.delta.alpha.size:
            raise ContractViolation("user_ids must match alpha length")
        if len(self.item_ids) != self.delta.beta.size:
            raise ContractViolation("item_ids must match beta length")
        if self.theta.r != self.delta.r:
            raise ContractViolation("theta and delta disagree on r")

    @property
    def M(self) -> int:
        return len(self.user_ids)

    @property
    def N(self) -> int:
        return len(self.item_ids)

    def user_index(self, ident) -> int | None:
        if not hasattr(self, "_uindex"):
            self._uindex = {u: k for k, u in enumerate(self.user_ids)}
            self._iindex = {i: k for k, i in enumerate(self.item_ids)}
        return self._uindex.get(str(ident))

    def item_index(self, ident) -> int | None:
        self.user_index(None)  # build both indexes
        return self._iindex.get(str(ident))


def _fmt(value) -> str:
    return f"{float(value):.17g}"


def _line(key, values) -> str:
    flat = np.ravel(np.asarray(values, dtype=np.float64))
    if flat.size == 0:
        return key
    return key + "\t" + "\t".join(_fmt(v) for v in flat)


def save_model(model: ModelFile, path) -> None:
    """Write the sectioned text format; 17 significant digits per number."""
    theta = model.theta
    lines = ["[HEADER]",
             f"version\t{MODEL_FORMAT_VERSION}",
             f"mode\t{model.mode}",
             f"M\t{model.M}", f"N\t{model.N}", f"r\t{theta.r}",
             f"p_u\t{theta.g_w.size}", f"p_v\t{theta.h_w.size}",
             "[THETA]"]
    for key in _THETA_KEYS:
        lines.append(_line(key, getattr(theta, key)))
    lines.append("[ALPHA]")
    lines.extend(_line(u, model.delta.alpha[k])
                 for k, u in enumerate(model.user_ids))
    lines.append("[BETA]")
    lines.extend(_line(i, model.delta.beta[k])
                 for k, i in enumerate(model.item_ids))
    lines.append("[U]")
    lines.extend(_line(u, model.delta.U[k])
                 for k, u in enumerate(model.user_ids))
    lines.append("[V]")
    lines.extend(_line(i, model.delta.V[k])
                 for k, i in enumerate(model.item_ids))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def _split_sections(path):
    sections = {}
    order = []
    current = None
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.rstrip("\n")
            if line.startswith("[") and line.endswith("]"):
                name = line[1:-1]
                if name not in _SECTIONS or name in sections:
                    raise ModelFormatError(f"unexpected section {line}",
                                           path=path, line=lineno)
                current = name
                order.append(name)
                sections[name] = []
            elif current is None:
                raise ModelFormatError("content before [HEADER]",
                                       path=path, line=lineno)
            elif line:
                sections[current].append((lineno, line))
    if tuple(order) != _SECTIONS:
        raise ModelFormatError(
            f"sections must be {list(_SECTIONS)} in order, found {order}",
            path=path)
    return sections


def _parse_keyed(pairs, expected_keys, section, path):
    table = {}
    for lineno, line in pairs:
        parts = line.split("\t")
        table[parts[0]] = (lineno, parts[1:])
    if tuple(table) != tuple(expected_keys):
        raise ModelFormatError(
            f"{section} must list {list(expected_keys)}, "
            f"found {list(table)}", path=path)
    return table


def _floats(section, key, raw, path, lineno):
    try:
        return np.array([float(v) for v in raw], dtype=np.float64)
    except ValueError:
        raise ModelFormatError(f"{section}: {key} has a malformed number",
                               path=path, line=lineno) from None


def _id_rows(section, pairs, count, width, path):
    if len(pairs) != count:
        raise ModelFormatError(
            f"{section} expects {count} row(s), found {len(pairs)}",
            path=path)
    ids, matrix = [], np.empty((count, width))
    for k, (lineno, line) in enumerate(pairs):
        parts = line.split("\t")
        values = _floats(section, parts[0], parts[1:], path, lineno)
        if values.size != width:
            raise ModelFormatError(
                f"{section}: row {parts[0]!r} expects {width} value(s), "
                f"found {values.size}", path=path, line=lineno)
        ids.append(parts[0])
        matrix[k] = values
    return ids, matrix


def load_model(path) -> ModelFile:
    """Read a model file back; the inverse of :func:`save_model`."""
    sections = _split_sections(path)

    header = _parse_keyed(sections["HEADER"], _HEADER_KEYS, "HEADER", path)
    try:
        version = int(header["version"][1][0])
        mode = header["mode"][1][0]
        M, N, r = (int(header[k][1][0]) for k in ("M", "N", "r"))
        p_u, p_v = (int(header[k][1][0]) for k in ("p_u", "p_v"))
    except (ValueError, IndexError):
        raise ModelFormatError("HEADER has a malformed field",
                               path=path) from None
    if version != MODEL_FORMAT_VERSION:
        raise ModelFormatError(
            f"unsupported model format version {version}", path=path)
    if mode not in _MODES:
        raise ModelFormatError(f"HEADER: unknown mode {mode!r}", path=path)
    if min(M, N, r, p_u, p_v) < 0 or min(p_u, p_v) == 0:
        raise ModelFormatError("HEADER: dimensions out of range", path=path)

    theta_raw = _parse_keyed(sections["THETA"], _THETA_KEYS, "THETA", path)
    widths = {"g_w": p_u, "h_w": p_v, "G_w": r * p_u, "H_w": r * p_v,
              "sigma2_alpha": 1, "sigma2_beta": 1, "sigma2_v": 1,
              "sigma2_u": r if (mode == "arsid" and r) else 1}
    values = {}
    for key, (lineno, raw) in theta_raw.items():
        vec = _floats("THETA", key, raw, path, lineno)
        if key in widths and vec.size != widths[key]:
            raise ModelFormatError(
                f"THETA: {key} expects {widths[key]} value(s), "
                f"found {vec.size}", path=path, line=lineno)
        values[key] = vec
    sigma2_u = (values["sigma2_u"] if mode == "arsid" and r
                else float(values["sigma2_u"][0]))
    try:
        theta = Hyperparams(
            f_w=values["f_w"], g_w=values["g_w"], h_w=values["h_w"],
            G_w=values["G_w"].reshape(r, p_u) if r else np.zeros((0, p_u)),
            H_w=values["H_w"].reshape(r, p_v) if r else np.zeros((0, p_v)),
            sigma2_alpha=float(values["sigma2_alpha"][0]),
            sigma2_beta=float(values["sigma2_beta"][0]),
            sigma2_u=sigma2_u, sigma2_v=float(values["sigma2_v"][0]), r=r)
    except ContractViolation as err:
        raise ModelFormatError(f"THETA: {err}", path=path) from None

    user_ids, alpha = _id_rows("ALPHA", sections["ALPHA"], M, 1, path)
    item_ids, beta = _id_rows("BETA", sections["BETA"], N, 1, path)
    u_ids, U = _id_rows("U", sections["U"], M, r, path)
    v_ids, V = _id_rows("V", sections["V"], N, r, path)
    if u_ids != user_ids:
        raise ModelFormatError("U rows must repeat the ALPHA ids in order",
                               path=path)
    if v_ids != item_ids:
        raise ModelFormatError("V rows must repeat the BETA ids in order",
                               path=path)
    delta = LatentState(alpha[:, 0], beta[:, 0], U, V)
    return ModelFile(mode, theta, delta, tuple(user_ids), tuple(item_ids))


def write_triples(dataset: Dataset, path) -> None:
    """Write a dataset back out as triple lines (covariates included)."""
    users = dataset.user_ids or [str(k) for k in range(dataset.M)]
    items = dataset.item_ids or [str(k) for k in range(dataset.N)]
    with open(path, "w", encoding="utf-8") as fh:
        for k in range(dataset.n_obs):
            parts = [users[dataset.user_idx[k]], items[dataset.item_idx[k]],
                     str(int(dataset.y[k]))]
            parts.extend(_fmt(v) for v in dataset.x_event[k, 1:])
            fh.write("\t".join(parts) + "\n")


def write_features(ids, matrix, path) -> None:
    """Write feature rows, dropping the internal intercept column."""
    matrix = np.asarray(matrix)
    with open(path, "w", encoding="utf-8") as fh:
        for k, ident in enumerate(ids):
            fh.write(_line(str(ident), matrix[k, 1:]) + "\n")
