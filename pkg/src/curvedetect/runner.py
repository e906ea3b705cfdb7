"""Experiment orchestration: manifests, staged pipelines, resumability.

An experiment is a declarative JSON manifest naming a corpus, generator
and detector backends, a perturbation config, and an output directory.
run_matrix executes pool -> perturb -> score (per detector) -> evaluate,
recording an input hash and output hashes for every stage in stages.json;
a stage re-runs only when its inputs changed or its outputs are missing.
With deterministic backends (or a warm response cache) a manifest maps to
byte-identical artifacts on every run.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from .curvature import CurvatureResult, curvature_from_reports, read_curvatures, write_curvatures
from .errors import BackendError, CapabilityError, GenerationError, ManifestError, ValidationError
from .evalstats import (
    DetectionMatrix,
    auc,
    breakdown,
    build_matrix,
    plot_breakdown,
    plot_matrix_heatmap,
    plot_mean_auc,
    roc_curve,
    write_breakdown_csv,
    write_breakdown_json,
    write_matrix_csv,
    write_matrix_json,
    write_roc_csv,
)
from .modelclient import EndpointConfig, GenerationParams, ModelClient, RemoteFillBackend, RemoteGenerator, RemoteScorer
from .perturb import EchoFillBackend, FillBackend, PerturbationConfig, UnigramFillBackend, perturb_k, read_perturbations, write_perturbations
from .scorer import NGramModel, NGramScorer, ScorerBackend
from .textpool import (
    GeneratorBackend,
    Label,
    NGramGenerator,
    TargetPool,
    TextRecord,
    extract_prompt,
    load_corpus,
    read_pool,
    write_pool,
)
from .util import atomic_write_text, canonical_json, derive_seed, file_sha256, normalize_ws, ordered_map, sha256_hex
from .version import ENGINE_VERSION

log = logging.getLogger("curvedetect.runner")

_POOL_DEFAULTS = {
    "seed": 0,
    "n_per_class": 300,
    "min_words": 30,
    "max_records": None,
    "prompt_words": 20,
    "min_machine_words": 25,
    "max_retries": 3,
}

_MANIFEST_KEYS = {
    "name", "pool", "generators", "detectors", "perturbation", "gen_params",
    "logprob_mode", "output_dir", "created", "engine_version", "cache_dir",
    "workers", "filler_ablation", "checkpoint_detectors",
}


# ----------------------------------------------------------------- manifest

@dataclass
class BackendSpec:
    alias: str
    kind: str  # "ngram" | "endpoint"
    options: dict

    @classmethod
    def parse(cls, obj: dict, role: str) -> "BackendSpec":
        if not isinstance(obj, dict):
            raise ManifestError(f"{role} spec must be an object, got {type(obj).__name__}")
        alias = obj.get("alias")
        kind = obj.get("kind")
        if not alias or not isinstance(alias, str):
            raise ManifestError(f'{role} spec needs a string "alias"')
        if kind == "ngram":
            for key in ("corpus", "order", "smoothing_k"):
                if key not in obj:
                    raise ManifestError(f"ngram backend {alias!r} needs {key!r}")
        elif kind == "endpoint":
            for key in ("base_url", "model"):
                if key not in obj:
                    raise ManifestError(f"endpoint backend {alias!r} needs {key!r}")
        elif kind == "echo":
            pass
        elif kind == "unigram":
            for key in ("corpus",):
                if key not in obj:
                    raise ManifestError(f"unigram filler {alias!r} needs {key!r}")
        else:
            raise ManifestError(f"{role} {alias!r}: unknown backend kind {kind!r}")
        options = {k: v for k, v in obj.items() if k not in ("alias", "kind")}
        return cls(alias=alias, kind=kind, options=options)

    def to_dict(self) -> dict:
        return {"alias": self.alias, "kind": self.kind, **self.options}


@dataclass
class ExperimentManifest:
    """Fully determines an experiment; hashed into every artifact."""

    name: str
    pool: dict
    generators: list[BackendSpec]
    detectors: list[BackendSpec]
    perturbation: PerturbationConfig
    filler: BackendSpec
    gen_params: GenerationParams
    logprob_mode: str
    output_dir: Path
    created: str
    cache_dir: Path | None
    workers: int
    raw: dict
    base_dir: Path
    filler_ablation: list[BackendSpec] = field(default_factory=list)
    checkpoint_detectors: list[tuple[int, BackendSpec]] = field(default_factory=list)

    @property
    def hash(self) -> str:
        # Execution-location fields do not change what the experiment
        # computes, so they stay out of the identity hash: the same science
        # run into two directories yields identical artifact provenance.
        material = {
            k: v for k, v in self.raw.items()
            if k not in ("output_dir", "cache_dir", "workers", "created")
        }
        return sha256_hex(canonical_json(material))

    def resolve(self, path: str | Path) -> Path:
        p = Path(path)
        return p if p.is_absolute() else (self.base_dir / p)

    @property
    def corpus_path(self) -> Path:
        return self.resolve(self.pool["corpus"])


def parse_manifest(raw: dict, base_dir: str | Path = ".") -> ExperimentManifest:
    if not isinstance(raw, dict):
        raise ManifestError("manifest must be a JSON object")
    unknown = set(raw) - _MANIFEST_KEYS
    if unknown:
        raise ManifestError(f"unknown manifest keys: {sorted(unknown)}")
    for key in ("name", "pool", "generators", "detectors", "perturbation", "output_dir"):
        if key not in raw:
            raise ManifestError(f"manifest is missing {key!r}")

    pool = dict(_POOL_DEFAULTS)
    pool_raw = raw["pool"]
    if not isinstance(pool_raw, dict) or "corpus" not in pool_raw:
        raise ManifestError('manifest "pool" must be an object with a "corpus" path')
    unknown = set(pool_raw) - set(_POOL_DEFAULTS) - {"corpus"}
    if unknown:
        raise ManifestError(f"unknown pool keys: {sorted(unknown)}")
    pool.update(pool_raw)

    generators = [BackendSpec.parse(g, "generator") for g in raw["generators"]]
    detectors = [BackendSpec.parse(d, "detector") for d in raw["detectors"]]
    if not generators or not detectors:
        raise ManifestError("need at least one generator and one detector")

    seen: dict[str, dict] = {}
    for spec in generators + detectors:
        previous = seen.get(spec.alias)
        if previous is not None and previous != spec.to_dict():
            raise ManifestError(f"alias {spec.alias!r} bound to two different specs")
        seen[spec.alias] = spec.to_dict()

    pcfg_raw = dict(raw["perturbation"])
    filler_raw = pcfg_raw.pop("filler", {"alias": "echo", "kind": "echo"})
    filler = BackendSpec.parse(filler_raw, "filler")
    try:
        perturbation = PerturbationConfig(filler=filler.alias, **pcfg_raw)
    except TypeError as e:
        raise ManifestError(f"bad perturbation config: {e}") from e

    gen_params = GenerationParams.from_dict(raw.get("gen_params", {}))
    logprob_mode = raw.get("logprob_mode", "sum")
    if logprob_mode not in ("sum", "mean"):
        raise ManifestError('logprob_mode must be "sum" or "mean"')

    ablation_fillers = [BackendSpec.parse(f, "filler") for f in raw.get("filler_ablation", [])]
    checkpoints: list[tuple[int, BackendSpec]] = []
    for entry in raw.get("checkpoint_detectors", []):
        if "step" not in entry:
            raise ManifestError('each checkpoint detector needs a "step" label')
        step = entry["step"]
        spec = BackendSpec.parse({k: v for k, v in entry.items() if k != "step"}, "detector")
        checkpoints.append((step, spec))
    steps = [s for s, _ in checkpoints]
    if steps != sorted(steps) or len(set(steps)) != len(steps):
        raise ManifestError("checkpoint steps must be strictly increasing")

    base_dir = Path(base_dir)
    cache_dir = raw.get("cache_dir")
    manifest = ExperimentManifest(
        name=raw["name"],
        pool=pool,
        generators=generators,
        detectors=detectors,
        perturbation=perturbation,
        filler=filler,
        gen_params=gen_params,
        logprob_mode=logprob_mode,
        output_dir=Path(raw["output_dir"]),
        created=raw.get("created", ""),
        cache_dir=Path(cache_dir) if cache_dir else None,
        workers=int(raw.get("workers", 1)),
        raw=raw,
        base_dir=base_dir,
        filler_ablation=ablation_fillers,
        checkpoint_detectors=checkpoints,
    )
    return manifest


def load_manifest(path: str | Path) -> ExperimentManifest:
    path = Path(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise ManifestError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ManifestError(f"{path} is not valid JSON: {e}") from e
    return parse_manifest(raw, base_dir=path.parent)


# ----------------------------------------------------------------- backends

class BackendRegistry:
    """Builds and memoizes backends from manifest specs.

    Builtin n-gram backends are trained once per (corpus, order, k) and
    shared across roles; endpoint backends share one ModelClient so the
    response cache and rate limiters are common to the whole run.
    """

    def __init__(self, manifest: ExperimentManifest, client: ModelClient):
        self.manifest = manifest
        self.client = client
        self._models: dict[str, NGramModel] = {}
        self._corpora: dict[str, list[str]] = {}

    def _corpus(self, path: Path, options: dict) -> list[str]:
        key = str(path)
        if key not in self._corpora:
            self._corpora[key] = load_corpus(
                path,
                min_words=options.get("corpus_min_words", 1),
                max_records=options.get("corpus_max_records"),
                seed=options.get("corpus_seed", 0),
            )
        return self._corpora[key]

    def _model(self, spec: BackendSpec) -> NGramModel:
        path = self.manifest.resolve(spec.options["corpus"])
        order = spec.options["order"] if spec.kind == "ngram" else 1
        k = spec.options.get("smoothing_k", 1.0)
        key = canonical_json([str(path), order, k])
        if key not in self._models:
            corpus = self._corpus(path, spec.options)
            self._models[key] = NGramModel.train(corpus, order=order, smoothing_k=k)
        return self._models[key]

    def _endpoint(self, spec: BackendSpec) -> EndpointConfig:
        o = spec.options
        return EndpointConfig(
            base_url=o["base_url"],
            model_name=o["model"],
            alias=spec.alias,
            timeout_ms=o.get("timeout_ms", 30_000),
            max_retries=o.get("max_retries", 3),
            rate_limit=o.get("rate_limit"),
            score_via=o.get("score_via", "echo"),
            capabilities=tuple(o.get("capabilities", ("generate", "score", "fill"))),
        )

    def generator(self, spec: BackendSpec) -> GeneratorBackend:
        if spec.kind == "ngram":
            return NGramGenerator(self._model(spec), identity=spec.alias)
        if spec.kind == "endpoint":
            return RemoteGenerator(self.client, self._endpoint(spec), identity=spec.alias)
        raise ManifestError(f"backend {spec.alias!r} ({spec.kind}) cannot generate")

    def scorer(self, spec: BackendSpec) -> ScorerBackend:
        if spec.kind == "ngram":
            return NGramScorer(self._model(spec), identity=spec.alias)
        if spec.kind == "endpoint":
            endpoint = self._endpoint(spec)
            if "score" not in endpoint.capabilities:
                raise CapabilityError(f"{spec.alias!r} is not scoreable")
            return RemoteScorer(self.client, endpoint, identity=spec.alias)
        raise ManifestError(f"backend {spec.alias!r} ({spec.kind}) cannot score")

    def filler(self, spec: BackendSpec) -> FillBackend:
        if spec.kind == "echo":
            backend = EchoFillBackend()
            backend.identity = spec.alias
            return backend
        if spec.kind == "unigram":
            return UnigramFillBackend(self._model(spec), identity=spec.alias)
        if spec.kind == "endpoint":
            return RemoteFillBackend(self.client, self._endpoint(spec), identity=spec.alias)
        raise ManifestError(f"backend {spec.alias!r} ({spec.kind}) cannot fill")

    def spec_fingerprint(self, spec: BackendSpec) -> dict:
        """Stage-hash material for a backend: its spec plus corpus content."""
        material = spec.to_dict()
        if spec.kind in ("ngram", "unigram"):
            material["corpus_sha256"] = file_sha256(self.manifest.resolve(spec.options["corpus"]))
        return material


# -------------------------------------------------------------- stage state

class StageState:
    """stages.json bookkeeping: a stage re-runs iff its input hash changed
    or any recorded output is missing/altered."""

    def __init__(self, directory: Path, manifest_hash: str):
        self.directory = directory
        self.path = directory / "stages.json"
        self.manifest_hash = manifest_hash
        self._stages: dict[str, dict] = {}
        if self.path.exists():
            try:
                payload = json.loads(self.path.read_text(encoding="utf-8"))
                self._stages = payload.get("stages", {})
            except ValueError:
                self._stages = {}

    def up_to_date(self, stage: str, input_hash: str) -> bool:
        entry = self._stages.get(stage)
        if entry is None or entry.get("input_hash") != input_hash:
            return False
        for rel, digest in entry.get("outputs", {}).items():
            path = self.directory / rel
            if not path.exists() or file_sha256(path) != digest:
                return False
        return True

    def record(self, stage: str, input_hash: str, outputs: Sequence[Path]) -> None:
        self._stages[stage] = {
            "input_hash": input_hash,
            "outputs": {
                str(p.relative_to(self.directory)): file_sha256(p) for p in outputs
            },
        }
        self._save()

    def clear(self, stage: str) -> None:
        if stage in self._stages:
            del self._stages[stage]
            self._save()

    def output_hash(self, stage: str) -> str:
        entry = self._stages.get(stage, {})
        return sha256_hex(canonical_json(entry.get("outputs", {})))

    def _save(self) -> None:
        payload = {
            "engine_version": ENGINE_VERSION,
            "manifest_hash": self.manifest_hash,
            "stages": self._stages,
        }
        atomic_write_text(self.path, json.dumps(payload, indent=2, sort_keys=True))


# ------------------------------------------------------------ pipeline core

@dataclass
class RunContext:
    manifest: ExperimentManifest
    registry: BackendRegistry
    state: StageState
    directory: Path
    workers: int
    stage_report: dict[str, str] = field(default_factory=dict)

    @property
    def meta(self) -> dict:
        return {"engine_version": ENGINE_VERSION, "manifest_hash": self.manifest.hash}


def _build_shared_pool(
    manifest: ExperimentManifest,
    registry: BackendRegistry,
    workers: int,
) -> TargetPool:
    """Pool with one shared human half and a machine half per generator.

    Unlike textpool.build_pool (single generator, spare substitution), the
    human records here are fixed up front so every generator row sees the
    same human texts; a machine generation that still fails after retries
    is dropped rather than substituted.
    """
    cfg = manifest.pool
    texts = load_corpus(
        manifest.corpus_path,
        min_words=cfg["min_words"],
        max_records=cfg["max_records"],
        seed=cfg["seed"],
    )
    eligible = [t for t in texts if len(t.split()) >= cfg["prompt_words"]]
    n = cfg["n_per_class"]
    if len(eligible) < n:
        raise ValidationError(
            f"corpus yields {len(eligible)} usable texts, pool needs {n}"
        )
    humans = eligible[:n]
    records = [
        TextRecord(id=f"human-{i:04d}", text=h, label=Label.HUMAN)
        for i, h in enumerate(humans)
    ]

    for spec in manifest.generators:
        generator = registry.generator(spec)
        backend_down = [0]

        def one(i: int) -> TextRecord | None:
            prompt = extract_prompt(humans[i], cfg["prompt_words"])
            for attempt in range(cfg["max_retries"] + 1):
                seed = derive_seed(cfg["seed"], spec.alias, i, attempt)
                try:
                    raw = generator.generate(prompt, manifest.gen_params, seed)
                except BackendError as e:
                    log.warning("generation failed (%s, record %d): %s", spec.alias, i, e)
                    backend_down[0] += 1
                    continue
                machine = normalize_ws(raw)
                if machine.startswith(prompt) and len(machine.split()) >= cfg["min_machine_words"]:
                    return TextRecord(
                        id=f"machine-{spec.alias}-{i:04d}",
                        text=machine,
                        label=Label.MACHINE,
                        generator_id=spec.alias,
                        prompt=prompt,
                    )
            return None

        produced = [r for r in ordered_map(one, range(n), workers=workers) if r is not None]
        if not produced and backend_down[0]:
            raise GenerationError(
                f"generator {spec.alias} produced nothing: backend failed "
                f"{backend_down[0]} times"
            )
        if len(produced) < n:
            log.warning(
                "generator %s: %d of %d machine texts dropped after retries",
                spec.alias, n - len(produced), n,
            )
        records.extend(produced)

    source = {
        "corpus": str(manifest.corpus_path),
        "generators": [s.alias for s in manifest.generators],
        "gen_params": manifest.gen_params.to_dict(),
        "engine_version": ENGINE_VERSION,
        "manifest_hash": manifest.hash,
        **{k: v for k, v in cfg.items() if k != "corpus"},
    }
    return TargetPool(records=records, seed=cfg["seed"], source_manifest=source)


def _stage_pool(ctx: RunContext) -> Path:
    out = ctx.directory / "pool.jsonl"
    input_hash = sha256_hex(canonical_json({
        "corpus_sha256": file_sha256(ctx.manifest.corpus_path),
        "pool": {k: v for k, v in ctx.manifest.pool.items() if k != "corpus"},
        "generators": [ctx.registry.spec_fingerprint(s) for s in ctx.manifest.generators],
        "gen_params": ctx.manifest.gen_params.to_dict(),
        "engine_version": ENGINE_VERSION,
    }))
    if ctx.state.up_to_date("pool", input_hash):
        ctx.stage_report["pool"] = "skipped"
        return out
    log.info("stage pool: building target pool")
    pool = _build_shared_pool(ctx.manifest, ctx.registry, ctx.workers)
    write_pool(pool, out)
    sidecar = out.with_name(out.stem + ".manifest.json")
    ctx.state.record("pool", input_hash, [out, sidecar])
    ctx.stage_report["pool"] = "executed"
    return out


def _stage_perturb(ctx: RunContext, pool_file: Path, pcfg: PerturbationConfig,
                   filler_spec: BackendSpec, out_name: str = "perturbations.jsonl") -> Path:
    out = ctx.directory / out_name
    input_hash = sha256_hex(canonical_json({
        "pool": ctx.state.output_hash("pool"),
        "perturbation": pcfg.to_dict(),
        "filler": ctx.registry.spec_fingerprint(filler_spec),
        "engine_version": ENGINE_VERSION,
    }))
    stage = f"perturb:{out_name}"
    if ctx.state.up_to_date(stage, input_hash):
        ctx.stage_report[stage] = "skipped"
        return out
    log.info("stage %s: k=%d mask_pct=%g", stage, pcfg.k, pcfg.mask_pct)
    pool = read_pool(pool_file)
    filler = ctx.registry.filler(filler_spec)

    def one(record: TextRecord):
        return [
            (record.id, i, p)
            for i, p in enumerate(perturb_k(record.text, pcfg, filler, record.id))
        ]

    rows = [row for chunk in ordered_map(one, pool.records, workers=ctx.workers) for row in chunk]
    write_perturbations(out, rows, meta=ctx.meta)
    ctx.state.record(stage, input_hash, [out])
    ctx.stage_report[stage] = "executed"
    return out


def _stage_score(ctx: RunContext, pool_file: Path, perturb_file: Path,
                 spec: BackendSpec, perturb_stage: str = "perturb:perturbations.jsonl") -> Path:
    scores_path = ctx.directory / "scores" / f"{spec.alias}.jsonl"
    curv_path = ctx.directory / "curvature" / f"{spec.alias}.jsonl"
    input_hash = sha256_hex(canonical_json({
        "pool": ctx.state.output_hash("pool"),
        "perturbations": ctx.state.output_hash(perturb_stage),
        "detector": ctx.registry.spec_fingerprint(spec),
        "logprob_mode": ctx.manifest.logprob_mode,
        "engine_version": ENGINE_VERSION,
    }))
    stage = f"score:{spec.alias}"
    if ctx.state.up_to_date(stage, input_hash):
        ctx.stage_report[stage] = "skipped"
        return curv_path
    log.info("stage %s", stage)
    pool = read_pool(pool_file)
    neighbors = read_perturbations(perturb_file)
    detector = ctx.registry.scorer(spec)
    mode = ctx.manifest.logprob_mode

    def one(record: TextRecord):
        target = detector.logprob(record.text)
        reports = [detector.logprob(t) for t in neighbors[record.id]]
        score_row = {
            "record_id": record.id,
            "target": {"total_logprob": target.total_logprob, "token_count": target.token_count},
            "perturbations": [
                {"total_logprob": r.total_logprob, "token_count": r.token_count}
                for r in reports
            ],
        }
        result = curvature_from_reports(record.id, spec.alias, target, reports, mode)
        return score_row, result

    outputs = ordered_map(one, pool.records, workers=ctx.workers)
    scores_path.parent.mkdir(parents=True, exist_ok=True)
    lines = [json.dumps({"__meta__": ctx.meta}, sort_keys=True)]
    lines += [json.dumps(row, sort_keys=True) for row, _ in outputs]
    atomic_write_text(scores_path, "\n".join(lines) + "\n")
    curv_path.parent.mkdir(parents=True, exist_ok=True)
    write_curvatures(curv_path, [res for _, res in outputs], meta=ctx.meta)
    ctx.state.record(stage, input_hash, [scores_path, curv_path])
    ctx.stage_report[stage] = "executed"
    return curv_path


def _stage_evaluate(ctx: RunContext, pool_file: Path, curvature_files: dict[str, Path],
                    generators: list[str], detectors: list[str]) -> DetectionMatrix:
    input_hash = sha256_hex(canonical_json({
        "curvatures": {
            alias: ctx.state.output_hash(f"score:{alias}") for alias in curvature_files
        },
        "generators": generators,
        "detectors": detectors,
        "engine_version": ENGINE_VERSION,
    }))
    stage = "evaluate"
    pool = read_pool(pool_file)
    results = {
        alias: read_curvatures(path) if path.exists() else []
        for alias, path in curvature_files.items()
    }
    matrix = build_matrix(results, pool.records, generators=generators, detectors=detectors)
    if ctx.state.up_to_date(stage, input_hash):
        ctx.stage_report[stage] = "skipped"
        return matrix
    log.info("stage evaluate: %d generators x %d detectors", len(generators), len(detectors))
    bd = breakdown(results, pool.records, generators=generators, detectors=detectors)
    meta = ctx.meta
    out = ctx.directory
    write_matrix_csv(matrix, out / "matrix.csv", meta=meta)
    write_matrix_csv(matrix, out / "matrix_diff.csv", diff=True, meta=meta)
    write_matrix_json(matrix, out / "matrix.json", meta=meta)
    write_breakdown_json(bd, out / "breakdown.json", meta=meta)
    write_breakdown_csv(bd, out / "breakdown.csv", meta=meta)
    outputs = [
        out / "matrix.csv", out / "matrix_diff.csv", out / "matrix.json",
        out / "breakdown.json", out / "breakdown.csv",
    ]
    roc_dir = out / "roc"
    label_of = {r.id: (r.label, r.generator_id) for r in pool.records}
    for det, rs in results.items():
        if not rs:
            continue
        humans = [r.curvature for r in rs if label_of[r.record_id][0] == Label.HUMAN]
        by_gen: dict[str, list[float]] = {}
        for r in rs:
            label, gen = label_of[r.record_id]
            if label == Label.MACHINE:
                by_gen.setdefault(gen, []).append(r.curvature)
        for gen, machine in sorted(by_gen.items()):
            if len(machine) >= 2 and len(humans) >= 2:
                roc_path = roc_dir / f"{gen}__{det}.csv"
                write_roc_csv(roc_curve(machine, humans), roc_path, meta=meta)
                outputs.append(roc_path)
    plots = out / "plots"
    plot_matrix_heatmap(matrix, plots / "heatmap.svg", meta=meta)
    plot_matrix_heatmap(matrix, plots / "heatmap_diff.svg", diff=True, meta=meta)
    plot_mean_auc(matrix, plots / "mean_auc.svg", meta=meta)
    plot_breakdown(bd, plots / "breakdown.svg", meta=meta)
    outputs += [plots / "heatmap.svg", plots / "heatmap_diff.svg",
                plots / "mean_auc.svg", plots / "breakdown.svg"]
    ctx.state.record(stage, input_hash, outputs)
    ctx.stage_report[stage] = "executed"
    return matrix


def _make_context(manifest: ExperimentManifest, directory: Path,
                  client: ModelClient | None, offline: bool,
                  cache_dir: Path | None, workers: int | None) -> RunContext:
    directory.mkdir(parents=True, exist_ok=True)
    if client is None:
        cache = cache_dir or manifest.cache_dir or (manifest.output_dir / "cache")
        client = ModelClient(cache_dir=manifest.resolve(cache), offline=offline)
    registry = BackendRegistry(manifest, client)
    state = StageState(directory, manifest.hash)
    return RunContext(
        manifest=manifest,
        registry=registry,
        state=state,
        directory=directory,
        workers=workers if workers is not None else manifest.workers,
    )


def _attach_run_log(directory: Path) -> logging.Handler:
    handler = logging.FileHandler(directory / "run.log", encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))
    logging.getLogger("curvedetect").addHandler(handler)
    logging.getLogger("curvedetect").setLevel(logging.INFO)
    return handler


def _write_manifest_copy(ctx: RunContext) -> None:
    payload = dict(ctx.manifest.raw)
    payload.setdefault("engine_version", ENGINE_VERSION)
    atomic_write_text(
        ctx.directory / "manifest.json", json.dumps(payload, indent=2, sort_keys=True)
    )


@dataclass
class MatrixRunResult:
    matrix: DetectionMatrix
    stage_report: dict[str, str]
    output_dir: Path
    partial: bool

    @property
    def exit_code(self) -> int:
        return 4 if self.partial else 0


def run_matrix(
    manifest: ExperimentManifest,
    client: ModelClient | None = None,
    offline: bool = False,
    cache_dir: Path | None = None,
    workers: int | None = None,
) -> MatrixRunResult:
    """Execute the full pipeline for a manifest and emit all artifacts.

    A detector whose scoring stage fails permanently is logged and becomes
    a column of holes; the run then finishes with partial results. Pool or
    perturbation failures abort (state stays resumable).
    """
    directory = manifest.resolve(manifest.output_dir)
    ctx = _make_context(manifest, directory, client, offline, cache_dir, workers)
    handler = _attach_run_log(directory)
    log.info("run %s: engine %s manifest %s", manifest.name, ENGINE_VERSION, manifest.hash)
    try:
        _write_manifest_copy(ctx)
        pool_file = _stage_pool(ctx)
        perturb_file = _stage_perturb(ctx, pool_file, manifest.perturbation, manifest.filler)
        curvature_files: dict[str, Path] = {}
        failed: list[str] = []
        for spec in manifest.detectors:
            try:
                curvature_files[spec.alias] = _stage_score(ctx, pool_file, perturb_file, spec)
            except BackendError as e:
                log.error("detector %s failed: %s", spec.alias, e)
                ctx.stage_report[f"score:{spec.alias}"] = "failed"
                curvature_files[spec.alias] = ctx.directory / "curvature" / f"{spec.alias}.jsonl"
                failed.append(spec.alias)
        matrix = _stage_evaluate(
            ctx, pool_file, curvature_files,
            generators=[g.alias for g in manifest.generators],
            detectors=[d.alias for d in manifest.detectors],
        )
        partial = bool(failed) or bool(matrix.missing)
        if matrix.missing:
            log.warning("matrix holes: %s", matrix.missing)
        return MatrixRunResult(
            matrix=matrix, stage_report=ctx.stage_report,
            output_dir=directory, partial=partial,
        )
    finally:
        logging.getLogger("curvedetect").removeHandler(handler)
        handler.close()


# ------------------------------------------------------------ single stages

def _single_stage(manifest: ExperimentManifest, client, offline, cache_dir, workers):
    directory = manifest.resolve(manifest.output_dir)
    ctx = _make_context(manifest, directory, client, offline, cache_dir, workers)
    handler = _attach_run_log(directory)
    return ctx, handler


def run_stage_pool(manifest: ExperimentManifest, client=None, offline=False,
                   cache_dir=None, workers=None) -> Path:
    ctx, handler = _single_stage(manifest, client, offline, cache_dir, workers)
    try:
        _write_manifest_copy(ctx)
        return _stage_pool(ctx)
    finally:
        logging.getLogger("curvedetect").removeHandler(handler)
        handler.close()


def run_stage_perturb(manifest: ExperimentManifest, client=None, offline=False,
                      cache_dir=None, workers=None) -> Path:
    ctx, handler = _single_stage(manifest, client, offline, cache_dir, workers)
    try:
        pool_file = ctx.directory / "pool.jsonl"
        if not pool_file.exists():
            raise ValidationError("pool stage has not run yet (pool.jsonl missing)")
        return _stage_perturb(ctx, pool_file, manifest.perturbation, manifest.filler)
    finally:
        logging.getLogger("curvedetect").removeHandler(handler)
        handler.close()


def run_stage_score(manifest: ExperimentManifest, detector_alias: str, client=None,
                    offline=False, cache_dir=None, workers=None) -> Path:
    ctx, handler = _single_stage(manifest, client, offline, cache_dir, workers)
    try:
        matches = [d for d in manifest.detectors if d.alias == detector_alias]
        if not matches:
            raise ValidationError(f"manifest has no detector aliased {detector_alias!r}")
        pool_file = ctx.directory / "pool.jsonl"
        perturb_file = ctx.directory / "perturbations.jsonl"
        if not pool_file.exists() or not perturb_file.exists():
            raise ValidationError("pool/perturb stages have not run yet")
        return _stage_score(ctx, pool_file, perturb_file, matches[0])
    finally:
        logging.getLogger("curvedetect").removeHandler(handler)
        handler.close()


def run_stage_eval(manifest: ExperimentManifest, client=None, offline=False,
                   cache_dir=None, workers=None) -> MatrixRunResult:
    ctx, handler = _single_stage(manifest, client, offline, cache_dir, workers)
    try:
        pool_file = ctx.directory / "pool.jsonl"
        if not pool_file.exists():
            raise ValidationError("pool stage has not run yet (pool.jsonl missing)")
        curvature_files = {
            d.alias: ctx.directory / "curvature" / f"{d.alias}.jsonl"
            for d in manifest.detectors
        }
        matrix = _stage_evaluate(
            ctx, pool_file, curvature_files,
            generators=[g.alias for g in manifest.generators],
            detectors=[d.alias for d in manifest.detectors],
        )
        return MatrixRunResult(
            matrix=matrix, stage_report=ctx.stage_report,
            output_dir=ctx.directory, partial=bool(matrix.missing),
        )
    finally:
        logging.getLogger("curvedetect").removeHandler(handler)
        handler.close()


# ------------------------------------------------------------- self pipeline

def _self_detection_run(
    ctx: RunContext,
    pool_file: Path,
    pcfg: PerturbationConfig,
    filler_spec: BackendSpec,
    tag: str,
) -> tuple[dict[str, float | None], dict[str, dict]]:
    """Perturb + score with detector == generator for every generator.

    Returns (auc per generator alias, per-alias curvature stats by class).
    """
    perturb_file = _stage_perturb(ctx, pool_file, pcfg, filler_spec, out_name=f"perturbations-{tag}.jsonl")
    aucs: dict[str, float | None] = {}
    stats: dict[str, dict] = {}
    pool = read_pool(pool_file)
    label_of = {r.id: (r.label, r.generator_id) for r in pool.records}
    for spec in ctx.manifest.generators:
        curv_path = ctx.directory / "curvature" / f"{tag}-{spec.alias}.jsonl"
        stage = f"score:{tag}-{spec.alias}"
        input_hash = sha256_hex(canonical_json({
            "pool": ctx.state.output_hash("pool"),
            "perturbations": ctx.state.output_hash(f"perturb:perturbations-{tag}.jsonl"),
            "detector": ctx.registry.spec_fingerprint(spec),
            "logprob_mode": ctx.manifest.logprob_mode,
            "engine_version": ENGINE_VERSION,
        }))
        if not ctx.state.up_to_date(stage, input_hash):
            log.info("stage %s", stage)
            detector = ctx.registry.scorer(spec)
            neighbors = read_perturbations(perturb_file)
            mode = ctx.manifest.logprob_mode

            def one(record: TextRecord):
                target = detector.logprob(record.text)
                reports = [detector.logprob(t) for t in neighbors[record.id]]
                return curvature_from_reports(record.id, spec.alias, target, reports, mode)

            results = ordered_map(one, pool.records, workers=ctx.workers)
            curv_path.parent.mkdir(parents=True, exist_ok=True)
            write_curvatures(curv_path, results, meta=ctx.meta)
            ctx.state.record(stage, input_hash, [curv_path])
            ctx.stage_report[stage] = "executed"
        else:
            ctx.stage_report[stage] = "skipped"
        results = read_curvatures(curv_path)
        human = [r.curvature for r in results if label_of[r.record_id][0] == Label.HUMAN]
        machine = [
            r.curvature for r in results
            if label_of[r.record_id][0] == Label.MACHINE
            and label_of[r.record_id][1] == spec.alias
        ]
        aucs[spec.alias] = auc(machine, human) if len(machine) >= 2 and len(human) >= 2 else None
        stats[spec.alias] = {
            "machine": {"mean": float(np.mean(machine)) if machine else None,
                        "std": float(np.std(machine)) if machine else None,
                        "n": len(machine)},
            "human": {"mean": float(np.mean(human)) if human else None,
                      "std": float(np.std(human)) if human else None,
                      "n": len(human)},
        }
    return aucs, stats


@dataclass
class AblationResult:
    rows: list[dict]
    output_dir: Path
    stage_report: dict[str, str]


def run_ablation_maskpct(
    manifest: ExperimentManifest,
    pcts: Sequence[float] = (0.01, 0.02, 0.15, 0.50, 0.90),
    client: ModelClient | None = None,
    offline: bool = False,
    cache_dir: Path | None = None,
    workers: int | None = None,
) -> AblationResult:
    """Self-detection AUC and curvature stats as the masked fraction varies.

    The manifest must fix contiguous masking (one span covering the whole
    masked fraction), matching the protocol this sweep reproduces.
    """
    if not manifest.perturbation.contiguous:
        raise ManifestError("mask-pct ablation requires perturbation.contiguous = true")
    if not pcts:
        raise ManifestError("need at least one masking percentage")
    directory = manifest.resolve(manifest.output_dir) / "ablate_maskpct"
    ctx = _make_context(manifest, directory, client, offline, cache_dir, workers)
    handler = _attach_run_log(directory)
    try:
        _write_manifest_copy(ctx)
        pool_file = _stage_pool(ctx)
        rows = []
        for pct in pcts:
            pcfg = PerturbationConfig(
                mask_pct=pct,
                span_len=manifest.perturbation.span_len,
                contiguous=True,
                k=manifest.perturbation.k,
                filler=manifest.filler.alias,
                seed=manifest.perturbation.seed,
            )
            aucs, stats = _self_detection_run(
                ctx, pool_file, pcfg, manifest.filler, tag=f"pct{pct:g}"
            )
            rows.append({"mask_pct": pct, "auc": aucs, "curvature": stats})
        _write_table(
            directory, "maskpct_table", rows, ctx.meta,
            csv_header="mask_pct,generator,auc,d_machine_mean,d_machine_std,d_human_mean,d_human_std",
            csv_rows=lambda row: [
                f'{row["mask_pct"]!r},{alias},{_r(row["auc"][alias])},'
                f'{_r(row["curvature"][alias]["machine"]["mean"])},'
                f'{_r(row["curvature"][alias]["machine"]["std"])},'
                f'{_r(row["curvature"][alias]["human"]["mean"])},'
                f'{_r(row["curvature"][alias]["human"]["std"])}'
                for alias in row["auc"]
            ],
        )
        _plot_maskpct(directory / "plots" / "maskpct.svg", rows, ctx.meta)
        return AblationResult(rows=rows, output_dir=directory, stage_report=ctx.stage_report)
    finally:
        logging.getLogger("curvedetect").removeHandler(handler)
        handler.close()


def run_ablation_filler(
    manifest: ExperimentManifest,
    fillers: Sequence[BackendSpec] | None = None,
    client: ModelClient | None = None,
    offline: bool = False,
    cache_dir: Path | None = None,
    workers: int | None = None,
) -> AblationResult:
    """Self-detection comparison across fill backends (needs at least two)."""
    fillers = list(fillers) if fillers is not None else list(manifest.filler_ablation)
    if len(fillers) < 2:
        raise ManifestError("filler ablation requires at least two fill backends")
    directory = manifest.resolve(manifest.output_dir) / "ablate_filler"
    ctx = _make_context(manifest, directory, client, offline, cache_dir, workers)
    handler = _attach_run_log(directory)
    try:
        _write_manifest_copy(ctx)
        pool_file = _stage_pool(ctx)
        rows = []
        for spec in fillers:
            pcfg = PerturbationConfig(
                mask_pct=manifest.perturbation.mask_pct,
                span_len=manifest.perturbation.span_len,
                contiguous=manifest.perturbation.contiguous,
                k=manifest.perturbation.k,
                filler=spec.alias,
                seed=manifest.perturbation.seed,
            )
            aucs, stats = _self_detection_run(ctx, pool_file, pcfg, spec, tag=f"filler-{spec.alias}")
            rows.append({"filler": spec.alias, "auc": aucs, "curvature": stats})
        _write_table(
            directory, "filler_table", rows, ctx.meta,
            csv_header="filler,generator,auc,d_machine_mean,d_machine_std,d_human_mean,d_human_std",
            csv_rows=lambda row: [
                f'{row["filler"]},{alias},{_r(row["auc"][alias])},'
                f'{_r(row["curvature"][alias]["machine"]["mean"])},'
                f'{_r(row["curvature"][alias]["machine"]["std"])},'
                f'{_r(row["curvature"][alias]["human"]["mean"])},'
                f'{_r(row["curvature"][alias]["human"]["std"])}'
                for alias in row["auc"]
            ],
        )
        _plot_filler(directory / "plots" / "filler.svg", rows, ctx.meta)
        return AblationResult(rows=rows, output_dir=directory, stage_report=ctx.stage_report)
    finally:
        logging.getLogger("curvedetect").removeHandler(handler)
        handler.close()


def run_checkpoint_sweep(
    manifest: ExperimentManifest,
    checkpoints: Sequence[tuple[int, BackendSpec]] | None = None,
    client: ModelClient | None = None,
    offline: bool = False,
    cache_dir: Path | None = None,
    workers: int | None = None,
) -> AblationResult:
    """Cross-detection AUC per generator across detector training steps.

    Detectors are an ordered list labeled with strictly increasing step
    values (a partially trained checkpoint is just another endpoint; the
    builtin proxy is an n-gram trained on a corpus prefix).
    """
    checkpoints = list(checkpoints) if checkpoints is not None else list(manifest.checkpoint_detectors)
    if not checkpoints:
        raise ManifestError("checkpoint sweep needs labeled detector endpoints")
    steps = [s for s, _ in checkpoints]
    if steps != sorted(steps) or len(set(steps)) != len(steps):
        raise ManifestError("checkpoint steps must be strictly increasing")
    directory = manifest.resolve(manifest.output_dir) / "sweep_checkpoints"
    ctx = _make_context(manifest, directory, client, offline, cache_dir, workers)
    handler = _attach_run_log(directory)
    try:
        _write_manifest_copy(ctx)
        pool_file = _stage_pool(ctx)
        perturb_file = _stage_perturb(ctx, pool_file, manifest.perturbation, manifest.filler)
        curvature_files = {
            spec.alias: _stage_score(ctx, pool_file, perturb_file, spec)
            for _, spec in checkpoints
        }
        matrix = _stage_evaluate(
            ctx, pool_file, curvature_files,
            generators=[g.alias for g in manifest.generators],
            detectors=[spec.alias for _, spec in checkpoints],
        )
        rows = []
        for j, (step, spec) in enumerate(checkpoints):
            rows.append({
                "step": step,
                "detector": spec.alias,
                "auc": {gen: matrix.auc[i][j] for i, gen in enumerate(matrix.generators)},
            })
        _write_table(
            directory, "sweep_table", rows, ctx.meta,
            csv_header="step,detector,generator,auc",
            csv_rows=lambda row: [
                f'{row["step"]},{row["detector"]},{gen},{_r(v)}'
                for gen, v in row["auc"].items()
            ],
        )
        _plot_sweep(directory / "plots" / "checkpoints.svg", rows, ctx.meta)
        return AblationResult(rows=rows, output_dir=directory, stage_report=ctx.stage_report)
    finally:
        logging.getLogger("curvedetect").removeHandler(handler)
        handler.close()


# ------------------------------------------------------------------ helpers

def _r(value) -> str:
    return "" if value is None else repr(value)


def _write_table(directory: Path, name: str, rows: list[dict], meta: dict,
                 csv_header: str, csv_rows) -> None:
    payload = {"rows": rows, **meta}
    atomic_write_text(directory / f"{name}.json", json.dumps(payload, indent=2, sort_keys=True))
    lines = ["# " + " ".join(f"{k}={v}" for k, v in sorted(meta.items())), csv_header]
    for row in rows:
        lines.extend(csv_rows(row))
    atomic_write_text(directory / f"{name}.csv", "\n".join(lines) + "\n")


def _plot_maskpct(path: Path, rows: list[dict], meta: dict) -> None:
    from .evalstats import _new_figure, _save_svg

    mpl, fig = _new_figure(7.5, 3.4)
    ax_auc, ax_d = fig.subplots(1, 2)
    aliases = list(rows[0]["auc"]) if rows else []
    pcts = [row["mask_pct"] for row in rows]
    for alias in aliases:
        ax_auc.plot(pcts, [row["auc"][alias] for row in rows], marker="o", label=alias)
        means = [row["curvature"][alias]["machine"]["mean"] for row in rows]
        stds = [row["curvature"][alias]["machine"]["std"] for row in rows]
        ax_d.errorbar(pcts, means, yerr=stds, marker="o", capsize=3, label=f"{alias} machine")
        hmeans = [row["curvature"][alias]["human"]["mean"] for row in rows]
        hstds = [row["curvature"][alias]["human"]["std"] for row in rows]
        ax_d.errorbar(pcts, hmeans, yerr=hstds, marker="s", capsize=3, label=f"{alias} human")
    ax_auc.set_xlabel("masked fraction"); ax_auc.set_ylabel("self-detection AUC")
    ax_auc.set_ylim(0, 1.02); ax_auc.legend(fontsize=7)
    ax_d.set_xlabel("masked fraction"); ax_d.set_ylabel("curvature")
    ax_d.legend(fontsize=6)
    fig.tight_layout()
    _save_svg(mpl, fig, path, meta)


def _plot_filler(path: Path, rows: list[dict], meta: dict) -> None:
    from .evalstats import _new_figure, _save_svg

    mpl, fig = _new_figure(7.5, 3.4)
    ax_d, ax_auc = fig.subplots(1, 2)
    aliases = list(rows[0]["auc"]) if rows else []
    xs = np.arange(len(rows))
    labels = [row["filler"] for row in rows]
    for alias in aliases:
        means = [row["curvature"][alias]["machine"]["mean"] for row in rows]
        stds = [row["curvature"][alias]["machine"]["std"] for row in rows]
        ax_d.errorbar(xs - 0.05, means, yerr=stds, fmt="o", capsize=3, label=f"{alias} machine")
        hmeans = [row["curvature"][alias]["human"]["mean"] for row in rows]
        hstds = [row["curvature"][alias]["human"]["std"] for row in rows]
        ax_d.errorbar(xs + 0.05, hmeans, yerr=hstds, fmt="s", capsize=3, label=f"{alias} human")
        ax_auc.plot(xs, [row["auc"][alias] for row in rows], marker="o", label=alias)
    for ax in (ax_d, ax_auc):
        ax.set_xticks(xs, labels, rotation=20, ha="right")
        ax.legend(fontsize=7)
    ax_d.set_ylabel("curvature")
    ax_auc.set_ylabel("self-detection AUC")
    ax_auc.set_ylim(0, 1.02)
    fig.tight_layout()
    _save_svg(mpl, fig, path, meta)


def _plot_sweep(path: Path, rows: list[dict], meta: dict) -> None:
    from .evalstats import _new_figure, _save_svg

    mpl, fig = _new_figure(5.0, 3.4)
    ax = fig.subplots()
    steps = [row["step"] for row in rows]
    generators = list(rows[0]["auc"]) if rows else []
    for gen in generators:
        ax.plot(steps, [row["auc"][gen] for row in rows], marker="o", label=gen)
    ax.set_xlabel("training step")
    ax.set_ylabel("AUC")
    ax.set_ylim(0, 1.02)
    ax.legend(fontsize=7)
    fig.tight_layout()
    _save_svg(mpl, fig, path, meta)
