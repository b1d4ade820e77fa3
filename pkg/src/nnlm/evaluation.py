"""Perplexity evaluation protocol and the experiment harness.

Scoring walks an eval trace once: retrieve neighbors for each position's
key, compute the retrieved-target probability mass for the observed token,
optionally a continuous-cache probability from earlier positions in the
same document, interpolate with the base LM probability, and accumulate
negative log-likelihood in float64. Positions whose target was absent from
every retrieved value contribute zero neighbor mass (they are counted as
retrieval misses), which is why the tuning grid tops out below 1.

Reference results from the original large-scale runs of this method
(Wikitext-103, 247M-parameter transformer, 103M-entry datastore) are kept
here for documentation only; they are far outside desk scale:
base 18.65 -> +retrieval 16.12 -> +recent-context cache 15.79 test ppl.
"""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field, replace

import numpy as np

from .ann_index import (
    IndexConfig,
    IvfPqIndex,
    Metric,
    SearchParams,
    build_index,
    desk_scale,
    exact_search,
    search_batch,
)
from .corpus import TokenSequence, Vocab, WindowSpec, windows_matrix
from .datastore import Datastore, EvalTrace, Provenance, build_datastore, subsample
from .knn_lm import (
    DEFAULT_LAMBDA_GRID,
    CacheConfig,
    InterpolationConfig,
    cache_scores,
    interpolated_nll,
    knn_target_probability,
    neighbor_shares,
    tune_lambda,
    tune_lambda_joint,
)
from .neural_lm import (
    DEFAULT_TAP,
    FfLmModel,
    KeyTap,
    LmConfig,
    extract_key,
    extract_keys_batch,
    init_model,
    target_logp_batch,
    train,
)
from .ngram_lm import train_ngram
from .util import NnlmError

REFERENCE_RESULTS = {
    "wikitext103_base_test_ppl": 18.65,
    "wikitext103_knn_test_ppl": 16.12,
    "wikitext103_knn_cache_test_ppl": 15.79,
    "books_base_test_ppl": 11.89,
    "books_knn_test_ppl": 10.89,
}


@dataclass
class EvalReport:
    perplexities: dict[str, float]
    lambdas: dict[str, float]
    token_count: int
    retrieval_misses: int
    search: dict[str, object] = field(default_factory=dict)
    wall_clock: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.token_count <= 0:
            raise NnlmError("report needs at least one scored token")

    def summary_lines(self) -> list[str]:
        lines = [
            f"{name:>9} ppl {ppl:.4f}"
            for name, ppl in self.perplexities.items()
        ]
        if self.lambdas:
            lines.append("weights " + ", ".join(f"{k}={v:g}" for k, v in self.lambdas.items()))
        lines.append(f"tokens {self.token_count}, retrieval misses {self.retrieval_misses}")
        return lines


def make_trace(
    model: FfLmModel, seq: TokenSequence, spec: WindowSpec | None = None, tap: KeyTap = DEFAULT_TAP
) -> EvalTrace:
    """One record per token: key, target, base log-probability (inference)."""
    spec = spec or WindowSpec(model.config.context_len)
    if spec.context_len != model.config.context_len:
        raise NnlmError("window width does not match model context_len")
    ctx, targets = windows_matrix(seq, spec)
    if len(targets) == 0:
        raise NnlmError("empty sequence")
    keys = extract_keys_batch(model, ctx, tap)
    logp = target_logp_batch(model, ctx, targets)
    prov = Provenance(tap=tap, model_hash=model.content_hash(), corpus_hash=seq.content_hash())
    return EvalTrace(
        keys=keys,
        targets=targets.astype(np.uint32),
        logp_lm=logp,
        doc_offsets=seq.doc_offsets.copy(),
        provenance=prov,
    )


def knn_target_probs(
    trace: EvalTrace,
    ds: Datastore,
    index: IvfPqIndex | None,
    params: SearchParams,
    threads: int | None = None,
) -> np.ndarray:
    """p_knn(target) per trace record; exact full-precision scan when no
    index is supplied."""
    if ds.dim != trace.dim:
        raise NnlmError(f"trace dim {trace.dim} does not match datastore dim {ds.dim}")
    out = np.empty(trace.count, dtype=np.float64)
    if index is None:
        for i in range(trace.count):
            ns = exact_search(ds, trace.keys[i], params.k, Metric.SQUARED_L2)
            out[i] = knn_target_probability(ns, int(trace.targets[i]))
    else:
        results = search_batch(index, ds, trace.keys, params, threads=threads)
        for i, ns in enumerate(results):
            out[i] = knn_target_probability(ns, int(trace.targets[i])) if len(ns) else 0.0
    return out


def cache_target_probs(trace: EvalTrace, cfg: CacheConfig) -> np.ndarray:
    """p_cache(target) per record from the per-document rolling history.

    Positions with no history (document starts) get p_cache = p_lm, which
    makes the cache interpolation an exact no-op there for any weight.
    """
    out = np.exp(trace.logp_lm.astype(np.float64))  # default: no-op positions
    doc_ids = trace.doc_ids()
    keys = trace.keys
    for doc in np.unique(doc_ids):
        pos = np.flatnonzero(doc_ids == doc)
        for j, i in enumerate(pos):
            if j == 0:
                continue
            lo = max(0, j - cfg.window)
            hist = pos[lo:j]
            w = cache_scores(keys[hist], keys[i], cfg.theta)
            mask = trace.targets[hist] == trace.targets[i]
            out[i] = float(w[mask].sum() / w.sum())
    return out


def evaluate(
    trace: EvalTrace,
    ds: Datastore | None = None,
    index: IvfPqIndex | None = None,
    params: SearchParams | None = None,
    interp: InterpolationConfig | None = None,
    cache: CacheConfig | None = None,
    threads: int | None = None,
) -> EvalReport:
    """Score a trace: base perplexity, retrieval-interpolated perplexity,
    and optionally the recent-context cache and the three-way combination."""
    interp = interp or InterpolationConfig()
    perplexities = {"base": trace.base_perplexity()}
    lambdas: dict[str, float] = {}
    clocks: dict[str, float] = {}
    misses = 0
    search_echo: dict[str, object] = {}

    p_knn = None
    if ds is not None:
        params = params or SearchParams()
        t0 = time.perf_counter()
        p_knn = knn_target_probs(trace, ds, index, params, threads=threads)
        clocks["search_s"] = time.perf_counter() - t0
        misses = int(np.count_nonzero(p_knn == 0.0))
        search_echo = {
            "k": params.k,
            "nprobe": params.nprobe if index is not None else None,
            "rerank": params.rerank.value if index is not None else "exact_scan",
            "tap": trace.provenance.tap.value if trace.provenance.tap else "external",
        }
        t0 = time.perf_counter()
        if interp.lam is None:
            lam, knn_ppl = tune_lambda(trace.logp_lm, p_knn, interp.grid)
        else:
            lam = interp.lam
            if lam == 1.0 and misses > 0:
                raise NnlmError(
                    f"lambda=1 with {misses} retrieval misses gives zero probability; use lambda < 1"
                )
            knn_ppl = float(np.exp(interpolated_nll(trace.logp_lm, p_knn, lam)))
        clocks["tune_s"] = time.perf_counter() - t0
        lambdas["lambda"] = lam
        perplexities["knn"] = knn_ppl

    if cache is not None:
        t0 = time.perf_counter()
        p_cache = cache_target_probs(trace, cache)
        clocks["cache_s"] = time.perf_counter() - t0
        if cache.cache_lam is None:
            clam, cache_ppl = tune_lambda(trace.logp_lm, p_cache, interp.grid)
        else:
            clam = cache.cache_lam
            cache_ppl = float(np.exp(interpolated_nll(trace.logp_lm, p_cache, clam)))
        lambdas["cache_lambda"] = clam
        perplexities["cache"] = cache_ppl
        if p_knn is not None:
            if interp.lam is None or cache.cache_lam is None:
                jlam, jclam, joint_ppl = tune_lambda_joint(trace.logp_lm, p_knn, p_cache, interp.grid)
            else:
                jlam, jclam = interp.lam, cache.cache_lam
                mixed = jlam * p_knn + (1 - jlam) * (
                    jclam * p_cache + (1 - jclam) * np.exp(trace.logp_lm.astype(np.float64))
                )
                joint_ppl = float(np.exp(-np.log(mixed).mean()))
            lambdas["knn_cache_lambda"] = jlam
            lambdas["knn_cache_cache_lambda"] = jclam
            perplexities["knn_cache"] = joint_ppl

    return EvalReport(
        perplexities=perplexities,
        lambdas=lambdas,
        token_count=trace.count,
        retrieval_misses=misses,
        search=search_echo,
        wall_clock=clocks,
    )


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

SWEEP_AXES = ("k", "lambda", "datastore_size", "nprobe", "key_tap", "ngram_order")


@dataclass(frozen=True)
class ExperimentGrid:
    axis: str
    values: tuple

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise NnlmError(f"unknown sweep axis {self.axis!r}; choose from {SWEEP_AXES}")
        if not self.values:
            raise NnlmError("sweep needs at least one value")
        if list(self.values) != sorted(self.values):
            raise NnlmError("sweep values must be sorted ascending")


@dataclass
class SweepEnv:
    """Everything a sweep might need; axes use the relevant subset."""

    trace: EvalTrace
    ds: Datastore | None = None
    index: IvfPqIndex | None = None
    params: SearchParams = SearchParams()
    grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID
    model: FfLmModel | None = None
    seq_train: TokenSequence | None = None
    seq_dev: TokenSequence | None = None
    index_cfg: IndexConfig | None = None
    seed: int = 0
    threads: int | None = None


def _sweep_rows_from_pknn(env: SweepEnv, axis: str, value, p_knn: np.ndarray) -> dict:
    lam, ppl = tune_lambda(env.trace.logp_lm, p_knn, env.grid)
    return {
        "axis": axis,
        "value": value,
        "lambda": lam,
        "dev_ppl": ppl,
        "base_ppl": env.trace.base_perplexity(),
        "retrieval_misses": int(np.count_nonzero(p_knn == 0.0)),
    }


def run_sweep(grid: ExperimentGrid, env: SweepEnv) -> list[dict]:
    """One tuned evaluation per axis value. The mixing weight is re-tuned at
    every point, matching per-configuration tuning in the original study."""
    rows: list[dict] = []
    if grid.axis == "k":
        assert env.ds is not None and env.index is not None
        kmax = int(max(grid.values))
        results = search_batch(env.index, env.ds, env.trace.keys, replace(env.params, k=kmax), threads=env.threads)
        dists = [ns.distances for ns in results]
        vals = [ns.values for ns in results]
        for k in grid.values:
            p_knn = np.empty(env.trace.count)
            for i in range(env.trace.count):
                d, v = dists[i][:k], vals[i][:k]
                if len(d) == 0:
                    p_knn[i] = 0.0
                    continue
                w = np.exp(-(d - d.min()))
                p_knn[i] = w[v == int(env.trace.targets[i])].sum() / w.sum()
            rows.append(_sweep_rows_from_pknn(env, "k", int(k), p_knn))
    elif grid.axis == "lambda":
        assert env.ds is not None
        p_knn = knn_target_probs(env.trace, env.ds, env.index, env.params, env.threads)
        for lam in grid.values:
            ppl = float(np.exp(interpolated_nll(env.trace.logp_lm, p_knn, float(lam))))
            rows.append({
                "axis": "lambda", "value": float(lam), "lambda": float(lam),
                "dev_ppl": ppl, "base_ppl": env.trace.base_perplexity(),
                "retrieval_misses": int(np.count_nonzero(p_knn == 0.0)),
            })
    elif grid.axis == "nprobe":
        assert env.ds is not None and env.index is not None
        for nprobe in grid.values:
            p_knn = knn_target_probs(env.trace, env.ds, env.index, replace(env.params, nprobe=int(nprobe)), env.threads)
            rows.append(_sweep_rows_from_pknn(env, "nprobe", int(nprobe), p_knn))
    elif grid.axis == "datastore_size":
        assert env.ds is not None and env.index_cfg is not None
        for m in grid.values:
            m = int(m)
            if m == env.ds.count and env.index is not None:
                sub, sub_index = env.ds, env.index
            else:
                sub = subsample(env.ds, m, seed=env.seed)
                cfg, _ = desk_scale(env.index_cfg, m)
                sub_index = build_index(sub, cfg, threads=env.threads)
            nprobe = min(env.params.nprobe, sub_index.n_centroids)
            p_knn = knn_target_probs(env.trace, sub, sub_index, replace(env.params, nprobe=nprobe), env.threads)
            rows.append(_sweep_rows_from_pknn(env, "datastore_size", m, p_knn))
    elif grid.axis == "key_tap":
        assert env.model is not None and env.seq_train is not None and env.seq_dev is not None
        assert env.index_cfg is not None
        spec = WindowSpec(env.model.config.context_len)
        for tap_name in grid.values:
            tap = KeyTap(tap_name)
            ds = build_datastore(env.model, env.seq_train, spec, tap)
            cfg, _ = desk_scale(env.index_cfg, ds.count)
            index = build_index(ds, cfg, threads=env.threads)
            trace = make_trace(env.model, env.seq_dev, spec, tap)
            nprobe = min(env.params.nprobe, index.n_centroids)
            p_knn = knn_target_probs(trace, ds, index, replace(env.params, nprobe=nprobe), env.threads)
            lam, ppl = tune_lambda(trace.logp_lm, p_knn, env.grid)
            rows.append({
                "axis": "key_tap", "value": tap.value, "lambda": lam,
                "dev_ppl": ppl, "base_ppl": trace.base_perplexity(),
                "retrieval_misses": int(np.count_nonzero(p_knn == 0.0)),
            })
    elif grid.axis == "ngram_order":
        assert env.seq_train is not None and env.seq_dev is not None and env.model is not None
        spec = WindowSpec(env.model.config.context_len)
        ctx, targets = windows_matrix(env.seq_dev, spec)
        vocab_size = env.model.config.vocab_size
        for order in grid.values:
            ng = train_ngram(env.seq_train, order=int(order), vocab_size=vocab_size)
            p_ng = np.array([ng.prob(ctx[i], int(targets[i])) for i in range(len(targets))])
            lam, ppl = tune_lambda(env.trace.logp_lm, p_ng, env.grid)
            rows.append({
                "axis": "ngram_order", "value": int(order), "lambda": lam,
                "dev_ppl": ppl, "base_ppl": env.trace.base_perplexity(),
                "retrieval_misses": int(np.count_nonzero(p_ng == 0.0)),
            })
    return rows


def write_sweep_csv(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------


@dataclass
class MemorizationReport:
    loss_curve_dropout: list[float]
    loss_curve_no_dropout: list[float]
    train_ppl_dropout: float
    train_ppl_no_dropout: float
    dev_ppl_base: float
    dev_ppl_memorizer: float
    dev_ppl_interp_memorizer: float
    dev_ppl_knn: float
    lambda_memorizer: float
    lambda_knn: float

    @property
    def interp_gain(self) -> float:
        return self.dev_ppl_base - self.dev_ppl_interp_memorizer

    @property
    def knn_gain(self) -> float:
        return self.dev_ppl_base - self.dev_ppl_knn


def memorization_experiment(
    seq_train: TokenSequence,
    seq_dev: TokenSequence,
    config: LmConfig,
    grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID,
) -> MemorizationReport:
    """Train twins differing only in dropout; compare explicit retrieval
    against implicit parameter memorization as a source of dev gains."""
    if config.dropout_rate <= 0.0:
        raise NnlmError("config.dropout_rate must be > 0; the no-dropout twin is derived")
    spec = WindowSpec(config.context_len)
    base_model, curve_drop = train(init_model(config), seq_train, spec)
    memo_cfg = replace(config, dropout_rate=0.0)
    memo_model, curve_memo = train(init_model(memo_cfg), seq_train, spec)

    ctx_dev, tgt_dev = windows_matrix(seq_dev, spec)
    logp_base = target_logp_batch(base_model, ctx_dev, tgt_dev)
    p_memo = np.exp(target_logp_batch(memo_model, ctx_dev, tgt_dev))
    lam_memo, ppl_interp = tune_lambda(logp_base, p_memo, grid)

    ds = build_datastore(base_model, seq_train, spec)
    trace = make_trace(base_model, seq_dev, spec)
    p_knn = knn_target_probs(trace, ds, index=None, params=SearchParams(k=min(1024, ds.count)))
    lam_knn, ppl_knn = tune_lambda(logp_base, p_knn, grid)

    return MemorizationReport(
        loss_curve_dropout=curve_drop,
        loss_curve_no_dropout=curve_memo,
        train_ppl_dropout=float(np.exp(curve_drop[-1])),
        train_ppl_no_dropout=float(np.exp(curve_memo[-1])),
        dev_ppl_base=float(np.exp(-logp_base.mean())),
        dev_ppl_memorizer=float(np.exp(-np.log(np.maximum(p_memo, 1e-300)).mean())),
        dev_ppl_interp_memorizer=ppl_interp,
        dev_ppl_knn=ppl_knn,
        lambda_memorizer=lam_memo,
        lambda_knn=lam_knn,
    )


@dataclass
class DomainAdaptationReport:
    dev_ppl_cross_base: float       # out-of-domain LM, no datastore
    dev_ppl_cross_knn: float        # out-of-domain LM + in-domain datastore
    dev_ppl_in_base: float          # in-domain LM
    dev_ppl_in_knn: float           # in-domain LM + in-domain datastore
    lambda_cross: float
    lambda_in: float


def domain_adaptation_experiment(
    seq_train_lm: TokenSequence,
    seq_train_ds: TokenSequence,
    seq_dev: TokenSequence,
    config: LmConfig,
    index_cfg: IndexConfig | None = None,
    params: SearchParams | None = None,
    grid: tuple[float, ...] = DEFAULT_LAMBDA_GRID,
    in_domain_config: LmConfig | None = None,
    threads: int | None = None,
) -> DomainAdaptationReport:
    """Evaluate a foreign-domain LM on a target domain with and without a
    target-domain datastore, next to an in-domain reference LM."""
    spec = WindowSpec(config.context_len)
    params = params or SearchParams()

    def knn_eval(model: FfLmModel) -> tuple[float, float, float]:
        ds = build_datastore(model, seq_train_ds, spec)
        cfg, _ = desk_scale(index_cfg or IndexConfig(), ds.count)
        index = build_index(ds, cfg, threads=threads)
        trace = make_trace(model, seq_dev, spec)
        p = replace(params, nprobe=min(params.nprobe, index.n_centroids), k=min(params.k, ds.count))
        p_knn = knn_target_probs(trace, ds, index, p, threads)
        lam, ppl = tune_lambda(trace.logp_lm, p_knn, grid)
        return trace.base_perplexity(), ppl, lam

    cross_model, _ = train(init_model(config), seq_train_lm, spec)
    cross_base, cross_knn, lam_cross = knn_eval(cross_model)

    in_cfg = in_domain_config or config
    in_model, _ = train(init_model(in_cfg), seq_train_ds, WindowSpec(in_cfg.context_len))
    in_base, in_knn, lam_in = knn_eval(in_model)

    return DomainAdaptationReport(
        dev_ppl_cross_base=cross_base,
        dev_ppl_cross_knn=cross_knn,
        dev_ppl_in_base=in_base,
        dev_ppl_in_knn=in_knn,
        lambda_cross=lam_cross,
        lambda_in=lam_in,
    )


# ---------------------------------------------------------------------------
# qualitative neighbor inspection
# ---------------------------------------------------------------------------


def inspect_neighbors(
    context_text: str,
    vocab: Vocab,
    model: FfLmModel,
    seq_train: TokenSequence,
    ds: Datastore,
    index: IvfPqIndex | None = None,
    params: SearchParams | None = None,
    snippet_tokens: int = 12,
    tap: KeyTap = DEFAULT_TAP,
) -> list[dict]:
    """Rows of (training-set context snippet, target token, probability
    share), mirroring qualitative retrieval tables."""
    from .corpus import BOS_ID

    params = params or SearchParams(k=8)
    n = model.config.context_len
    ids = [vocab.id_of(t) for t in context_text.split()]
    if not ids:
        raise NnlmError("empty query context")
    window = ([BOS_ID] * max(0, n - len(ids)) + ids)[-n:]
    key = extract_key(model, window, tap)
    if index is None:
        ns = exact_search(ds, key, params.k, Metric.SQUARED_L2)
    else:
        from .ann_index import search

        ns = search(index, ds, key, params)
    shares = neighbor_shares(ns)
    rows = []
    for eid, value, share in zip(ns.entry_ids, ns.values, shares):
        start = max(0, int(eid) - snippet_tokens)
        snippet = " ".join(vocab.token_of(int(t)) for t in seq_train.ids[start:int(eid)])
        rows.append({
            "training_context": snippet + " ...",
            "target": vocab.token_of(int(value)),
            "share": float(share),
        })
    return rows
