"""Experiment front-end: flat key=value configs, seeded experiment execution,
JSONL/CSV/checkpoint persistence, and preset expansions that mirror the
attack-comparison, ablation, defense and malicious-ratio experiment grids.
"""
from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .attacks import ATTACK_METHODS, AttackConfig
from .data_ingest import (
    InteractionLog,
    generate_synthetic,
    leave_one_out_split,
    load_interactions,
)
from .defense import AGGREGATION_RULES, GM_GRANULARITIES, DefenseConfig
from .fedsim import FederationConfig, RoundReport, run_training, worker_count
from .metrics import EvalConfig
from .recmodel import VARIANTS, ModelConfig, save_checkpoint


class ConfigError(ValueError):
    """A config file key, value, or combination is invalid."""


@dataclass
class _KeySpec:
    default: object
    kind: str  # "int" | "float" | "str" | "choice" | "ints"
    choices: tuple = ()
    help: str = ""


# -1 for the seed keys means "follow fed.seed"; 0 for the auto keys means
# "derive from the data/model at run time".
KEY_SPECS: dict[str, _KeySpec] = {
    "data.source": _KeySpec("synthetic", "choice", ("synthetic", "file"), "corpus origin"),
    "data.path": _KeySpec("", "str", (), "corpus file (required for data.source = file)"),
    "data.format": _KeySpec("tsv", "choice", ("ml1m", "steam", "tsv"), "corpus file format"),
    "data.max_len": _KeySpec(200, "int", (), "history truncated to this many recent items"),
    "data.synthetic_users": _KeySpec(200, "int", (), "synthetic corpus: number of users"),
    "data.synthetic_items": _KeySpec(50, "int", (), "synthetic corpus: catalog size"),
    "data.synthetic_seq_len": _KeySpec(10, "int", (), "synthetic corpus: events per user"),
    "data.synthetic_seed": _KeySpec(-1, "int", (), "synthetic corpus seed (-1: follow fed.seed)"),
    "model.variant": _KeySpec("causal", "choice", VARIANTS, "sequence model direction"),
    "model.dim": _KeySpec(64, "int", (), "embedding/hidden width"),
    "model.ffn_dim": _KeySpec(0, "int", (), "feed-forward width (0: 4*dim)"),
    "model.dropout": _KeySpec(0.1, "float", (), "dropout on attention and FFN outputs"),
    "model.mask_prob": _KeySpec(0.15, "float", (), "cloze masking rate (bidirectional)"),
    "model.init_std": _KeySpec(0.02, "float", (), "embedding init standard deviation"),
    "fed.rounds": _KeySpec(30, "int", (), "federated training rounds"),
    "fed.clients_per_round": _KeySpec(0, "int", (), "clients sampled per round (0: min(256, N))"),
    "fed.server_lr": _KeySpec(0.01, "float", (), "server SGD learning rate"),
    "fed.weight_decay": _KeySpec(1e-5, "float", (), "server weight decay"),
    "fed.local_negatives_k": _KeySpec(1, "int", (), "sampled negatives per training positive"),
    "fed.seed": _KeySpec(0, "int", (), "master seed for the whole experiment"),
    "attack.method": _KeySpec("none", "choice", ATTACK_METHODS, "malicious gradient generator"),
    "attack.target_items": _KeySpec((), "ints", (), "items to promote (also evaluated when method = none)"),
    "attack.malicious_fraction": _KeySpec(0.0, "float", (), "fraction of users controlled"),
    "attack.search_time": _KeySpec(9, "int", (), "substitution candidates tried (T)"),
    "attack.similarity_threshold": _KeySpec(0.5, "float", (), "min cosine to replaced item (tau)"),
    "attack.contrastive_negatives": _KeySpec(100, "int", (), "negatives in the contrastive term (n)"),
    "attack.scale": _KeySpec(1.0, "float", (), "malicious gradient scale (alpha)"),
    "attack.seed": _KeySpec(-1, "int", (), "attacker seed (-1: follow fed.seed)"),
    "defense.rule": _KeySpec("fedavg", "choice", AGGREGATION_RULES, "server aggregation rule"),
    "defense.lambda": _KeySpec(0.3, "float", (), "mean/median blend (1: mean, 0: median)"),
    "defense.gm_tolerance": _KeySpec(1e-6, "float", (), "Weiszfeld stopping tolerance"),
    "defense.gm_max_iters": _KeySpec(100, "int", (), "Weiszfeld iteration cap"),
    "defense.gm_smoothing": _KeySpec(1e-8, "float", (), "Weiszfeld distance smoothing"),
    "defense.gm_granularity": _KeySpec("per_tensor", "choice", GM_GRANULARITIES, "median per tensor or on the full update"),
    "eval.every": _KeySpec(10, "int", (), "evaluate every this many rounds (final round always)"),
    "eval.negatives": _KeySpec(1000, "int", (), "sampled negatives per ranking evaluation"),
    "eval.er_ks": _KeySpec((5, 10, 20, 30), "ints", (), "exposure-ratio cutoffs"),
    "eval.hr_ks": _KeySpec((10,), "ints", (), "HR/NDCG cutoffs"),
}

PRESETS = ("attack_table", "ablation", "defense_table", "ratio_sweep")


def _parse_value(key: str, raw: str):
    spec = KEY_SPECS[key]
    raw = raw.strip()
    try:
        if spec.kind == "int":
            return int(raw)
        if spec.kind == "float":
            return float(raw)
        if spec.kind == "ints":
            return tuple(int(x) for x in raw.split(",") if x.strip()) if raw else ()
    except ValueError as exc:
        raise ConfigError(f"key {key!r}: expected {spec.kind}, got {raw!r}") from exc
    if spec.kind == "choice":
        if raw not in spec.choices:
            raise ConfigError(
                f"key {key!r}: unknown value {raw!r} (valid: {', '.join(spec.choices)})"
            )
        return raw
    return raw


def _serialize_value(key: str, value) -> str:
    if KEY_SPECS[key].kind == "ints":
        return ",".join(str(x) for x in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class ExperimentSpec:
    """Fully resolved experiment settings, keyed by config-file key."""

    values: tuple  # ordered (key, value) pairs, hashable for dedup/compare

    @classmethod
    def from_dict(cls, values: dict) -> "ExperimentSpec":
        return cls(values=tuple((k, values[k]) for k in KEY_SPECS))

    def as_dict(self) -> dict:
        return dict(self.values)

    def __getitem__(self, key: str):
        return self.as_dict()[key]

    def with_updates(self, **updates) -> "ExperimentSpec":
        d = self.as_dict()
        for key, value in updates.items():
            if key not in d:
                raise ConfigError(f"unknown key {key!r}")
            d[key] = value
        return ExperimentSpec.from_dict(d)

    def to_text(self) -> str:
        return "\n".join(f"{k} = {_serialize_value(k, v)}" for k, v in self.values) + "\n"

    @property
    def seed(self) -> int:
        return self["fed.seed"]

    @property
    def eval_every(self) -> int:
        return self["eval.every"]

    def model_config(self, n_items: int) -> ModelConfig:
        return ModelConfig(
            n_items=n_items,
            dim=self["model.dim"],
            ffn_dim=self["model.ffn_dim"],
            max_len=self["data.max_len"],
            variant=self["model.variant"],
            dropout=self["model.dropout"],
            mask_prob=self["model.mask_prob"],
            init_std=self["model.init_std"],
        )

    def federation_config(self) -> FederationConfig:
        return FederationConfig(
            rounds=self["fed.rounds"],
            clients_per_round=self["fed.clients_per_round"],
            server_lr=self["fed.server_lr"],
            weight_decay=self["fed.weight_decay"],
            seed=self["fed.seed"],
            local_negatives_k=self["fed.local_negatives_k"],
        )

    def attack_config(self) -> AttackConfig:
        return AttackConfig(
            method=self["attack.method"],
            target_items=self["attack.target_items"],
            malicious_fraction=self["attack.malicious_fraction"],
            search_time=self["attack.search_time"],
            similarity_threshold=self["attack.similarity_threshold"],
            contrastive_negatives=self["attack.contrastive_negatives"],
            attack_scale=self["attack.scale"],
            seed=self["attack.seed"],
        )

    def defense_config(self) -> DefenseConfig:
        return DefenseConfig(
            rule=self["defense.rule"],
            blend_lambda=self["defense.lambda"],
            gm_tolerance=self["defense.gm_tolerance"],
            gm_max_iters=self["defense.gm_max_iters"],
            gm_smoothing=self["defense.gm_smoothing"],
            gm_granularity=self["defense.gm_granularity"],
        )

    def eval_config(self) -> EvalConfig:
        return EvalConfig(
            n_negatives=self["eval.negatives"],
            er_ks=self["eval.er_ks"],
            hr_ks=self["eval.hr_ks"],
        )

    def load_log(self) -> InteractionLog:
        if self["data.source"] == "file":
            return load_interactions(self["data.path"], self["data.format"])
        return generate_synthetic(
            self["data.synthetic_users"],
            self["data.synthetic_items"],
            self["data.synthetic_seq_len"],
            self["data.synthetic_seed"],
        )


def parse_config_text(text: str, overrides: dict[str, str] | None = None) -> ExperimentSpec:
    values: dict[str, object] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        body = line.split("#", 1)[0].strip()
        if not body:
            continue
        if "=" not in body:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, raw = body.split("=", 1)
        key = key.strip()
        if key not in KEY_SPECS:
            raise ConfigError(
                f"line {lineno}: unknown key {key!r} (valid keys: {', '.join(KEY_SPECS)})"
            )
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        values[key] = _parse_value(key, raw)

    for key, raw in (overrides or {}).items():
        if key not in KEY_SPECS:
            raise ConfigError(f"override: unknown key {key!r}")
        values[key] = _parse_value(key, str(raw))

    for key, spec in KEY_SPECS.items():
        values.setdefault(key, spec.default)

    # -1 seed sentinels follow the master seed
    for key in ("data.synthetic_seed", "attack.seed"):
        if values[key] == -1:
            values[key] = values["fed.seed"]

    if values["data.source"] == "file" and not values["data.path"]:
        raise ConfigError("data.source = file requires data.path")

    spec = ExperimentSpec.from_dict(values)
    spec.attack_config().validate()
    spec.defense_config().validate()
    return spec


def parse_config(path: str | Path, overrides: dict[str, str] | None = None) -> ExperimentSpec:
    return parse_config_text(Path(path).read_text(encoding="utf-8"), overrides)


def config_help() -> str:
    lines = ["config keys (key = value, one per line, # comments allowed):"]
    for key, spec in KEY_SPECS.items():
        default = _serialize_value(key, spec.default) or "''"
        extra = f" [{'|'.join(spec.choices)}]" if spec.choices else ""
        lines.append(f"  {key:32s} default {default:12s} {spec.help}{extra}")
    return "\n".join(lines)


def summary_rows(round_dicts: Sequence[dict]) -> list[tuple[int, str, int, float]]:
    """Flatten the per-round metric reports; pure function of rounds.jsonl."""
    rows = []
    for rd in round_dicts:
        metrics = rd.get("metrics")
        if not metrics:
            continue
        for metric in ("hr", "ndcg", "er"):
            for k in sorted(metrics[metric], key=int):
                rows.append((rd["round"], metric, int(k), metrics[metric][k]))
    return rows


def write_summary(path: Path, round_dicts: Sequence[dict]) -> None:
    lines = ["round,metric,K,value"]
    for rnd, metric, k, value in summary_rows(round_dicts):
        lines.append(f"{rnd},{metric},{k},{value!r}")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def run_experiment(
    spec: ExperimentSpec, out_dir: str | Path, n_workers: int | None = None
) -> int:
    """Execute one experiment; write rounds.jsonl, summary.csv, checkpoint.bin
    and a reparseable spec.resolved into out_dir. Returns 0 on success."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    log = spec.load_log()
    clients = leave_one_out_split(log, spec["data.max_len"])
    fed_cfg = spec.federation_config()
    attack_cfg = spec.attack_config()

    params, reports = run_training(
        clients,
        spec.model_config(log.n_items),
        fed_cfg,
        attack_cfg=attack_cfg,
        defense_cfg=spec.defense_config(),
        eval_cfg=spec.eval_config(),
        eval_every=spec.eval_every,
        eval_targets=spec["attack.target_items"],
        n_workers=n_workers,
    )

    round_dicts = [r.to_json_dict() for r in reports]
    with (out_dir / "rounds.jsonl").open("w", encoding="utf-8") as fh:
        for rd in round_dicts:
            fh.write(json.dumps(rd, sort_keys=True) + "\n")
    write_summary(out_dir / "summary.csv", round_dicts)
    save_checkpoint(params, out_dir / "checkpoint.bin")

    resolved = spec.to_text() + (
        f"# resolved: clients_per_round = {fed_cfg.resolved_clients_per_round(log.n_users)}\n"
        f"# resolved: catalog n_users = {log.n_users}, n_items = {log.n_items}\n"
    )
    (out_dir / "spec.resolved").write_text(resolved, encoding="utf-8")
    return 0


def final_metrics(out_dir: str | Path) -> dict | None:
    """Metrics dict of the last evaluated round of a finished run."""
    last = None
    with (Path(out_dir) / "rounds.jsonl").open("r", encoding="utf-8") as fh:
        for line in fh:
            rd = json.loads(line)
            if rd.get("metrics"):
                last = rd
    return last


def preset(name: str, base: ExperimentSpec, scale: float = 1.0) -> list[tuple[str, ExperimentSpec]]:
    """Expand a base spec into the experiment grid of the named preset.

    `scale` multiplies every malicious fraction, so desk-scale corpora (where
    0.1% of the users rounds to zero clients) can keep the grid's shape.
    """
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r} (valid: {', '.join(PRESETS)})")
    if scale <= 0:
        raise ConfigError("scale must be positive")

    def frac(m: float) -> float:
        scaled = m * scale
        if not 0.0 < scaled < 1.0:
            raise ConfigError(f"scaled malicious fraction {scaled} outside (0, 1)")
        return scaled

    base_method = base["attack.method"]
    attacking = base_method if base_method != "none" else "darts"
    out: list[tuple[str, ExperimentSpec]] = []

    if name == "attack_table":
        for variant in VARIANTS:
            for method in ("none", "ra", "eb", "ara", "darts"):
                updates = {"model.variant": variant, "attack.method": method}
                if method != "none":
                    updates["attack.malicious_fraction"] = frac(
                        base["attack.malicious_fraction"]
                    )
                out.append((f"{variant}-{method}", base.with_updates(**updates)))
    elif name == "ablation":
        for method in ("c_fsr", "s_fsr", "darts"):
            out.append(
                (
                    method,
                    base.with_updates(
                        **{
                            "attack.method": method,
                            "attack.malicious_fraction": frac(
                                base["attack.malicious_fraction"]
                            ),
                        }
                    ),
                )
            )
    elif name == "defense_table":
        for m in (0.0005, 0.001, 0.002):
            for rule in AGGREGATION_RULES:
                out.append(
                    (
                        f"m{m:g}-{rule}",
                        base.with_updates(
                            **{
                                "attack.method": attacking,
                                "attack.malicious_fraction": frac(m),
                                "defense.rule": rule,
                            }
                        ),
                    )
                )
    elif name == "ratio_sweep":
        for m in (0.001, 0.002, 0.003, 0.004, 0.005, 0.01):
            out.append(
                (
                    f"m{m:g}",
                    base.with_updates(
                        **{
                            "attack.method": attacking,
                            "attack.malicious_fraction": frac(m),
                        }
                    ),
                )
            )
    for _, s in out:
        s.attack_config().validate()
    return out


def run_preset(
    name: str,
    base: ExperimentSpec,
    out_dir: str | Path,
    scale: float = 1.0,
    n_workers: int | None = None,
) -> Path:
    """Run every experiment of a preset into out_dir/<tag>/ and write a
    comparison CSV of final metrics. Returns the comparison file path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    specs = preset(name, base, scale=scale)

    workers = worker_count() if n_workers is None else max(1, n_workers)
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(
                pool.map(lambda ts: run_experiment(ts[1], out_dir / ts[0], n_workers=1), specs)
            )
    else:
        for tag, s in specs:
            run_experiment(s, out_dir / tag, n_workers=1)

    lines = [
        "tag,attack,variant,defense,malicious_fraction,round,"
        "hr10,ndcg10,er5,er10,er20,er30"
    ]
    for tag, s in specs:
        last = final_metrics(out_dir / tag)
        m = last["metrics"] if last else {}
        hr = m.get("hr", {})
        ndcg = m.get("ndcg", {})
        er = m.get("er", {})
        lines.append(
            ",".join(
                str(x)
                for x in (
                    tag,
                    s["attack.method"],
                    s["model.variant"],
                    s["defense.rule"],
                    s["attack.malicious_fraction"] if s["attack.method"] != "none" else 0.0,
                    last["round"] if last else "",
                    hr.get("10", ""),
                    ndcg.get("10", ""),
                    er.get("5", ""),
                    er.get("10", ""),
                    er.get("20", ""),
                    er.get("30", ""),
                )
            )
        )
    comparison = out_dir / "comparison.csv"
    comparison.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return comparison
