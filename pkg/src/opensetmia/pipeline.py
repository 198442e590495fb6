"""Config-driven experiment stages and their on-disk artifacts.

Every stage is a pure function of the config (and the global seed). Stages
cache their outputs in an output directory keyed by a fingerprint of the
config sections they depend on, so running the commands one by one gives
the same numbers as a single in-process run.
"""

from __future__ import annotations

import copy
import hashlib
import json
import math
import os
import shutil
import tempfile
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._util import ContractError, DataFormatError, sub_seed, substream
from .attacks import METHODS, AttackInputs, attack_from_json, attack_inputs, fit_attack
from .boundary import BoundarySearchConfig
from .dataset import (
    AUGMENTATIONS,
    Dataset,
    ExperimentSplits,
    augment,
    generate_synthetic_population,
    load_dataset,
    make_splits,
    save_dataset,
    splits_from_manifest,
)
from .ensemble import EnsembleAttack, partition_identities, train_ensemble, write_votes_csv
from .evaluation import epoch_study, evaluate_decisions, roc_sweep
from .model import (
    PRESETS,
    ClassifierSpec,
    TrainConfig,
    checkpoint_from_dict,
    checkpoint_to_dict,
    train_classifier,
)
from .records import import_prediction_records

SOURCES = ("synthetic", "path", "records")

DEFAULTS = {
    "split": {"samples_per_id_per_portion": 25},
    "target": {"hidden": [128, 64], "preset": "overfitting", "epochs": None},
    "attack": {
        "method": "yeom",
        "objective": "accuracy",
        "yeom_mode": "sweep",
        "search": {},
        "salem": {"preset": "overfitting", "epochs": None},
        "nonmembers": None,
        "arch": None,
    },
    "ensemble": {"subsets": 1, "singleton": False, "k": 1},
    "evaluation": {"n_bins": 30, "epsilon": 1e-9, "checkpoints": None, "strategy": None},
}

SYNTHETIC_DEFAULTS = {
    "n_individuals": 60,
    "samples_per_id": 75,
    "feature_dim": 64,
    "noise": 0.5,
    "augment": None,
}


def _merge(base, over):
    out = copy.deepcopy(base)
    for key, val in over.items():
        if isinstance(val, dict) and isinstance(out.get(key), dict) and out[key]:
            out[key] = _merge(out[key], val)
        else:
            out[key] = copy.deepcopy(val)
    return out


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def fingerprint(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


@dataclass
class ExperimentConfig:
    """Validated experiment description.

    ``data`` is the full JSON document with defaults filled in; ``base_dir``
    resolves relative paths and is not part of the fingerprint.
    """

    data: dict
    base_dir: Path = field(default_factory=Path.cwd)

    @classmethod
    def from_dict(cls, doc: dict, base_dir=None) -> "ExperimentConfig":
        if not isinstance(doc, dict):
            raise ContractError("config must be a JSON object")
        unknown = set(doc) - {"seed", "dataset", *DEFAULTS}
        if unknown:
            raise ContractError(f"unknown config keys: {sorted(unknown)}")
        cfg = cls(_merge(DEFAULTS, doc), Path(base_dir) if base_dir is not None else Path.cwd())
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise ContractError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise ContractError(f"config file {path} is not valid JSON ({exc})") from None
        return cls.from_dict(doc, path.parent)

    def override(self, dotted: str, value) -> "ExperimentConfig":
        """Copy with one field replaced, e.g. ``override("attack.method", "salem")``."""
        data = copy.deepcopy(self.data)
        node = data
        *parents, leaf = dotted.split(".")
        for key in parents:
            node = node.setdefault(key, {})
        node[leaf] = value
        out = ExperimentConfig(data, self.base_dir)
        out.validate()
        return out

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def source(self) -> str:
        return next(iter(self.data["dataset"]))

    def resolve(self, p) -> Path:
        p = Path(p)
        return p if p.is_absolute() else self.base_dir / p

    def validate(self):
        d = self.data
        seed = d.get("seed")
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ContractError("config needs an integer 'seed'")
        ds = d.get("dataset")
        if not isinstance(ds, dict) or len(ds) != 1 or next(iter(ds)) not in SOURCES:
            raise ContractError(f"'dataset' must name exactly one source out of {SOURCES}")
        src, val = next(iter(ds.items()))
        if src == "synthetic":
            if not isinstance(val, dict):
                raise ContractError("dataset.synthetic must be an object")
            extra = set(val) - set(SYNTHETIC_DEFAULTS)
            if extra:
                raise ContractError(f"unknown synthetic parameters: {sorted(extra)}")
            aug = val.get("augment")
            if aug is not None:
                bad = set(aug.get("kinds", [])) - set(AUGMENTATIONS)
                if bad:
                    raise ContractError(f"unknown augmentation kinds {sorted(bad)}")
        elif src == "path":
            self._require_file(val)
        else:
            if not isinstance(val, dict) or set(val) != {"attack", "eval"}:
                raise ContractError("dataset.records needs 'attack' and 'eval' record files")
            for p in val.values():
                self._require_file(p)
        if d["attack"]["method"] not in METHODS:
            raise ContractError(f"unknown attack method {d['attack']['method']!r}; expected one of {METHODS}")
        if src == "records" and d["attack"]["method"] == "label-only":
            raise ContractError("the label-only attack needs a queryable target, not prediction records")
        for section in ("target", "attack.salem"):
            node = d
            for key in section.split("."):
                node = node[key]
            if node["preset"] not in PRESETS:
                raise ContractError(f"{section}.preset must be one of {sorted(PRESETS)}")
            if node["epochs"] is not None and (not isinstance(node["epochs"], int) or node["epochs"] < 0):
                raise ContractError(f"{section}.epochs must be a non-negative integer")
        nm = d["attack"]["nonmembers"]
        if isinstance(nm, str):
            self._require_file(nm)
        elif nm is not None and not (isinstance(nm, dict) and set(nm) == {"synthetic"}):
            raise ContractError("attack.nonmembers must be a dataset path or {'synthetic': {...}}")
        ens = d["ensemble"]
        if not isinstance(ens["subsets"], int) or ens["subsets"] < 1:
            raise ContractError("ensemble.subsets must be a positive integer")
        if not isinstance(ens["k"], int) or ens["k"] < 1:
            raise ContractError("ensemble.k must be a positive integer")
        try:
            BoundarySearchConfig.from_json(d["attack"]["search"])
        except TypeError as exc:
            raise ContractError(f"bad attack.search: {exc}") from None

    def _require_file(self, p):
        if not isinstance(p, str) or not self.resolve(p).is_file():
            raise ContractError(f"referenced file {p!r} does not exist")

    # --- derived objects ---------------------------------------------------

    def search(self) -> BoundarySearchConfig:
        doc = {"seed": self.seed, **self.data["attack"]["search"]}
        return BoundarySearchConfig.from_json(doc)

    def target_train_config(self) -> TrainConfig:
        t = self.data["target"]
        cfg = TrainConfig.from_preset(t["preset"], seed=self.seed)
        return cfg if t["epochs"] is None else cfg.with_epochs(t["epochs"])

    def salem_train_config(self) -> TrainConfig:
        s = self.data["attack"]["salem"]
        cfg = TrainConfig.from_preset(s["preset"], seed=self.seed)
        return cfg if s["epochs"] is None else cfg.with_epochs(s["epochs"])

    # --- fingerprints of the sections each stage depends on ----------------

    def stage_key(self, stage: str) -> str:
        d = self.data
        parts = {"seed": d["seed"], "dataset": self._dataset_identity()}
        if stage == "dataset":
            return fingerprint(parts)
        parts["split"] = d["split"]
        if stage == "split":
            return fingerprint(parts)
        parts["target"] = d["target"]
        if stage == "target":
            return fingerprint(parts)
        a = d["attack"]
        label_only = a["method"] == "label-only"
        search = self.search().to_json() if label_only else None
        if stage == "eval_inputs":
            return fingerprint({**parts, "search": search})
        parts.update(search=search, nonmembers=self._nonmember_identity(), arch=a["arch"])
        if stage == "attack_inputs":
            return fingerprint(parts)
        parts["attack"] = {k: v for k, v in a.items() if k not in ("search", "nonmembers", "arch")}
        if stage == "attack":
            return fingerprint(parts)
        if stage == "ensemble":
            return fingerprint({**parts, "ensemble": d["ensemble"]})
        if stage == "epoch_study":
            return fingerprint({**parts, "evaluation": d["evaluation"]})
        raise ContractError(f"unknown stage {stage!r}")

    def _file_hash(self, p):
        return hashlib.sha256(self.resolve(p).read_bytes()).hexdigest()

    def _dataset_identity(self):
        src, val = next(iter(self.data["dataset"].items()))
        if src == "synthetic":
            return {"synthetic": _merge(SYNTHETIC_DEFAULTS, val)}
        if src == "path":
            return {"path": self._file_hash(val)}
        return {"records": {k: self._file_hash(v) for k, v in sorted(val.items())}}

    def _nonmember_identity(self):
        nm = self.data["attack"]["nonmembers"]
        if isinstance(nm, str):
            return {"path": self._file_hash(nm)}
        return nm

    def fingerprint(self) -> str:
        """Content hash of the config; referenced files enter by content."""
        doc = copy.deepcopy(self.data)
        doc["dataset"] = self._dataset_identity()
        doc["attack"]["nonmembers"] = self._nonmember_identity()
        return fingerprint(doc)


# --- atomic artifact output --------------------------------------------------


class ArtifactWriter:
    """Collects a command's files in a scratch directory and moves them into
    the output directory only when the command succeeds."""

    def __init__(self, out_dir: Path):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.out_dir))
        self.names: list[str] = []
        self.replaced_dirs: list[str] = []

    def replace_dir(self, name: str):
        """On commit, clear ``name`` in the output directory before moving files in."""
        self.replaced_dirs.append(name)

    def path(self, name: str) -> Path:
        if name not in self.names:
            self.names.append(name)
        p = self.tmp / name
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def write_json(self, name, obj):
        text = json.dumps(_json_safe(obj), indent=2, sort_keys=True, allow_nan=False)
        self.path(name).write_text(text + "\n", encoding="utf-8")

    def write_text(self, name, text):
        self.path(name).write_text(text, encoding="utf-8")

    def commit(self):
        for name in self.replaced_dirs:
            shutil.rmtree(self.out_dir / name, ignore_errors=True)
        for name in self.names:
            dest = self.out_dir / name
            dest.parent.mkdir(parents=True, exist_ok=True)
            os.replace(self.tmp / name, dest)
        shutil.rmtree(self.tmp, ignore_errors=True)

    def abort(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


@contextmanager
def artifacts(out_dir):
    w = ArtifactWriter(out_dir)
    try:
        yield w
    except BaseException:
        w.abort()
        raise
    w.commit()


# --- helpers ---------------------------------------------------------------


def _json_safe(obj):
    """Infinite floats become "inf"/"-inf" strings (float() parses them back)."""
    if isinstance(obj, float) and not math.isfinite(obj):
        if math.isnan(obj):
            return None
        return "inf" if obj > 0 else "-inf"
    if isinstance(obj, dict):
        return {k: _json_safe(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_json_safe(v) for v in obj]
    return obj


def inputs_to_json(inputs: AttackInputs) -> dict:
    return {
        "records": [r.to_json() for r in inputs.records()],
        "distances": None if inputs.distances is None else [
            "inf" if math.isinf(d) else float(d) for d in inputs.distances
        ],
    }


def inputs_from_json(doc: dict) -> AttackInputs:
    from .records import PredictionRecord

    recs = [
        PredictionRecord(r["sample_id"], tuple(r["confidences"]), r["true_label"], r["predicted_label"], r["membership"])
        for r in doc["records"]
    ]
    dist = doc.get("distances")
    if dist is not None:
        dist = [math.inf if d == "inf" else d for d in dist]
    return AttackInputs.from_records(recs, dist)


def _csv_text(header, rows) -> str:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(repr(v) if isinstance(v, float) else str(v) for v in row))
    return "\n".join(lines) + "\n"


@dataclass
class Timer:
    stages: dict = field(default_factory=dict)

    @contextmanager
    def stage(self, name):
        t = time.perf_counter()
        yield
        self.stages[name] = self.stages.get(name, 0.0) + time.perf_counter() - t


# --- the pipeline ------------------------------------------------------------


class Pipeline:
    """Lazily computed experiment stages with an optional on-disk cache.

    With ``out_dir`` set, each stage first looks for its artifact there and
    reuses it when the stored stage key matches the config; otherwise it
    recomputes. Artifacts are only written by :meth:`write_*` methods.
    """

    STATE = "stages.json"

    def __init__(self, config: ExperimentConfig, out_dir=None, timer: Timer | None = None):
        self.config = config
        self.out_dir = None if out_dir is None else Path(out_dir)
        self.timer = timer or Timer()
        self._memo: dict = {}

    # cache plumbing
    def _state(self) -> dict:
        if self.out_dir is None:
            return {}
        p = self.out_dir / self.STATE
        if not p.is_file():
            return {}
        try:
            return json.loads(p.read_text(encoding="utf-8"))
        except json.JSONDecodeError:
            raise DataFormatError(f"{p} is corrupt") from None

    def _cached(self, stage: str, name: str):
        """Path of a reusable artifact, or None."""
        if self.out_dir is None:
            return None
        entry = self._state().get(stage)
        p = self.out_dir / name
        if entry and entry.get("key") == self.config.stage_key(stage) and p.is_file():
            return p
        return None

    def record_stages(self, w: ArtifactWriter, produced: dict):
        state = self._state()
        for stage, name in produced.items():
            state[stage] = {"key": self.config.stage_key(stage), "artifact": name}
        w.write_json(self.STATE, state)

    def _memoize(self, name, fn):
        if name not in self._memo:
            with self.timer.stage(name):
                self._memo[name] = fn()
        return self._memo[name]

    # stages
    def dataset(self) -> Dataset:
        return self._memoize("dataset", self._dataset)

    def _dataset(self):
        cfg = self.config
        if cfg.source == "records":
            raise ContractError("this command needs samples, but the config supplies prediction records")
        cached = self._cached("dataset", "dataset.csv")
        if cached is not None:
            return load_dataset(cached, source="synthetic" if cfg.source == "synthetic" else "external")
        src, val = next(iter(cfg["dataset"].items()))
        if src == "path":
            return load_dataset(cfg.resolve(val))
        return synthesize(_merge(SYNTHETIC_DEFAULTS, val), cfg.seed)

    def splits(self) -> ExperimentSplits:
        return self._memoize("split", self._splits)

    def _splits(self):
        data = self.dataset()
        cached = self._cached("split", "splits.json")
        if cached is not None:
            return splits_from_manifest(data, json.loads(cached.read_text(encoding="utf-8")))
        return make_splits(data, self.config["split"]["samples_per_id_per_portion"], self.config.seed)

    def target(self):
        return self._memoize("target", self._target)

    def _target(self):
        sp = self.splits()
        cached = self._cached("target", "target.json")
        if cached is not None:
            return checkpoint_from_dict(json.loads(cached.read_text(encoding="utf-8")))
        spec = ClassifierSpec.mlp(sp.target_train.feature_dim, len(sp.target_train.identities),
                                  tuple(self.config["target"]["hidden"]))
        return train_classifier(sp.target_train, sp.target_val, spec, self.config.target_train_config())

    def _search_or_none(self):
        return self.config.search() if self.config["attack"]["method"] == "label-only" else None

    def attack_set(self) -> AttackInputs:
        """Labelled records the attack is fitted on."""
        return self._memoize("attack_inputs", self._attack_set)

    def _attack_set(self):
        cfg = self.config
        if cfg.source == "records":
            return AttackInputs.from_records(import_prediction_records(cfg.resolve(cfg["dataset"]["records"]["attack"])))
        cached = self._cached("attack_inputs", "attack_inputs.json")
        if cached is not None:
            return inputs_from_json(json.loads(cached.read_text(encoding="utf-8")))
        sp, search = self.splits(), self._search_or_none()
        nonmembers = self.attack_nonmembers()
        if cfg["attack"]["arch"] is not None:
            # cross-architecture: calibrate on a shadow classifier of another shape
            # trained on target_val, with target_train pictures as its unseen-member set
            shadow = self.shadow()
            members = attack_inputs(shadow, sp.target_train, 1, search)
            return members.concat(attack_inputs(shadow, nonmembers, 0, search))
        target = self.target()
        return attack_inputs(target, sp.attack_member, 1, search).concat(attack_inputs(target, nonmembers, 0, search))

    def attack_nonmembers(self) -> Dataset:
        sp = self.splits()
        nm = self.config["attack"]["nonmembers"]
        if nm is None:
            return sp.attack_nonmember
        if isinstance(nm, str):
            other = load_dataset(self.config.resolve(nm))
        else:
            # a separately seeded population with identity numbers past the main one
            offset = max(self.dataset().identities) + 1
            other = synthesize(_merge(SYNTHETIC_DEFAULTS, nm["synthetic"]), sub_seed(self.config.seed, "alt-population"),
                               prefix="alt", id_offset=offset)
        return cross_nonmembers(other, sp, self.config.seed)

    def shadow(self):
        return self._memoize("shadow", self._shadow)

    def _shadow(self):
        sp = self.splits()
        spec = ClassifierSpec.mlp(sp.target_val.feature_dim, len(sp.target_val.identities),
                                  tuple(self.config["attack"]["arch"]))
        return train_classifier(sp.target_val, None, spec, self.config.target_train_config())

    def eval_set(self) -> AttackInputs:
        return self._memoize("eval_inputs", self._eval_set)

    def _eval_set(self):
        cfg = self.config
        if cfg.source == "records":
            return AttackInputs.from_records(import_prediction_records(cfg.resolve(cfg["dataset"]["records"]["eval"])))
        cached = self._cached("eval_inputs", "eval_inputs.json")
        if cached is not None:
            return inputs_from_json(json.loads(cached.read_text(encoding="utf-8")))
        sp, target, search = self.splits(), self.target(), self._search_or_none()
        return attack_inputs(target, sp.eval_member, 1, search).concat(attack_inputs(target, sp.eval_nonmember, 0, search))

    def attack(self):
        return self._memoize("attack", self._attack)

    def _attack(self):
        cached = self._cached("attack", "attack.json")
        if cached is not None:
            return attack_from_json(json.loads(cached.read_text(encoding="utf-8")))
        a = self.config["attack"]
        return fit_attack(
            a["method"], self.attack_set(),
            train_config=self.config.salem_train_config(),
            search=self._search_or_none(),
            objective=a["objective"],
            yeom_mode=a["yeom_mode"],
        )

    def evaluation(self) -> dict:
        return self._memoize("eval", self._evaluation)

    def _evaluation(self):
        attack, ev = self.attack(), self.eval_set()
        truth = ev.require_membership()
        scores = attack.scores(ev)
        roc = roc_sweep(scores, truth, higher_is_member=attack.higher_is_member)
        metrics = evaluate_decisions(attack.decide(ev), truth, auc=roc.auc)
        return {"metrics": metrics, "roc": roc, "scores": scores, "decisions": attack.decide(ev)}

    def ensemble(self) -> tuple[EnsembleAttack, object]:
        return self._memoize("ensemble", self._ensemble)

    def _ensemble(self):
        cfg = self.config
        if cfg.source == "records":
            raise ContractError("ensembles need identity information, which prediction records do not carry")
        if cfg["attack"]["arch"] is not None:
            raise ContractError("ensembles are not combined with a cross-architecture attack")
        sp, e = self.splits(), cfg["ensemble"]
        plan = partition_identities(
            sp.attack_member.identities, e["subsets"], cfg.seed, self.attack_nonmembers().identities,
            singleton=e["singleton"],
        )
        rule = "or" if e["k"] == 1 else "k-of-l"
        ens = train_ensemble(
            _with_nonmembers(sp, self.attack_nonmembers()), plan, cfg["attack"]["method"], self.target(),
            inputs=self.attack_set(),
            train_config=cfg.salem_train_config(), search=self._search_or_none(),
            objective=cfg["attack"]["objective"], rule=rule, k=e["k"],
        )
        ev = self.eval_set()
        return ens, evaluate_decisions(ens.decide(ev), ev.require_membership())

    def epoch_study(self):
        return self._memoize("epoch_study", self._epoch_study)

    def _epoch_study(self):
        cfg, sp = self.config, self.splits()
        ev = cfg["evaluation"]
        tc = cfg.target_train_config()
        checkpoints = ev["checkpoints"]
        if checkpoints is None:
            checkpoints = sorted({round(tc.epochs * i / 10) for i in range(11)})
        spec = ClassifierSpec.mlp(sp.target_train.feature_dim, len(sp.target_train.identities),
                                  tuple(cfg["target"]["hidden"]))
        strategy = ev["strategy"] or cfg["attack"]["method"]
        return epoch_study(sp, spec, tc, checkpoints, strategy,
                           search=cfg.search(), n_bins=ev["n_bins"], epsilon=ev["epsilon"])

    CHAIN = ("dataset", "split", "target", "attack", "eval")
    ARTIFACT = {"dataset": "dataset.csv", "split": "splits.json", "target": "target.json",
                "attack": "attack.json", "eval": "eval_inputs.json"}

    def write_through(self, w: ArtifactWriter, last: str) -> dict:
        """Write ``last`` and every upstream artifact that is missing or stale."""
        chain = ("attack", "eval") if self.config.source == "records" else self.CHAIN
        if last not in chain:
            raise ContractError(f"stage {last!r} needs a dataset source, not prediction records")
        produced = {}
        for stage in chain[: chain.index(last) + 1]:
            key = "eval_inputs" if stage == "eval" else stage
            if stage == last or self._cached(key, self.ARTIFACT[stage]) is None:
                produced.update(getattr(self, "write_" + ("splits" if stage == "split" else stage))(w))
        return produced

    # writers
    def write_dataset(self, w):
        save_dataset(self.dataset(), w.path("dataset.csv"))
        return {"dataset": "dataset.csv"}

    def write_splits(self, w):
        w.write_json("splits.json", self.splits().manifest())
        return {"split": "splits.json"}

    def write_target(self, w):
        model = self.target()
        w.write_json("target.json", checkpoint_to_dict(model))
        h = model.history or {}
        rows = zip(*(h[k] for k in ("epoch", "train_loss", "train_acc", "val_loss", "val_acc"))) if h else []
        w.write_text("history.csv", _csv_text(["epoch", "train_loss", "train_acc", "val_loss", "val_acc"], rows))
        return {"target": "target.json"}

    def write_attack(self, w):
        attack = self.attack()
        w.write_json("attack_inputs.json", inputs_to_json(self.attack_set()))
        w.write_json("attack.json", attack.to_json())
        calib = {"method": attack.method, "threshold": float(attack.threshold)}
        if hasattr(attack, "sweep"):
            calib["sweep"] = attack.sweep
        w.write_json("calibration.json", calib)
        return {"attack_inputs": "attack_inputs.json", "attack": "attack.json"}

    def write_eval(self, w):
        res = self.evaluation()
        ev = self.eval_set()
        w.write_json("eval_inputs.json", inputs_to_json(ev))
        w.write_text("roc.csv", _csv_text(["tau", "tpr", "fpr"], self._roc_rows(res["roc"])))
        rows = [
            (sid, float(s), int(d), int(t))
            for sid, s, d, t in zip(ev.sample_ids, res["scores"], res["decisions"], ev.membership)
        ]
        w.write_text("decisions.csv", _csv_text(["sample_id", "score", "decision", "truth"], rows))
        w.write_json("report.json", self.report())
        return {"eval_inputs": "eval_inputs.json"}

    @staticmethod
    def _roc_rows(roc):
        return [("inf" if math.isinf(t) and t > 0 else "-inf" if math.isinf(t) else t, a, b) for t, a, b in roc.rows()]

    def write_ensemble(self, w):
        ens, metrics = self.ensemble()
        w.replace_dir("ensemble")
        paths = []
        for j, sub in enumerate(ens.members):
            name = f"ensemble/sub_{j:03d}.json"
            w.write_json(name, sub.attack.to_json())
            paths.append(name)
        manifest = ens.to_json(paths)
        manifest["fingerprint"] = self.config.fingerprint()
        w.write_json("ensemble.json", manifest)
        w.write_json("ensemble_metrics.json", metrics.to_json())
        write_votes_csv(w.path("votes.csv"), self.eval_set(), ens)
        return {}

    def write_epoch_study(self, w):
        rows = [(p.epoch, p.overfit, p.kl, p.attack_acc) for p in self.epoch_study()]
        w.write_text("epoch_study.csv", _csv_text(["epoch", "overfit", "kl", "attack_acc"], rows))
        return {}

    def report(self) -> dict:
        cfg = self.config
        res = self.evaluation()
        outputs = {
            "attack": "attack.json",
            "roc": "roc.csv",
            "decisions": "decisions.csv",
        }
        if cfg.source != "records":
            outputs.update(dataset="dataset.csv", splits="splits.json", target="target.json")
        return {
            "fingerprint": cfg.fingerprint(),
            "seed": cfg.seed,
            "config": cfg.data,
            "method": cfg["attack"]["method"],
            "threshold": float(self.attack().threshold),
            "metrics": res["metrics"].to_json(),
            "outputs": outputs,
        }


def synthesize(params: dict, seed, prefix="syn", id_offset=0) -> Dataset:
    data = generate_synthetic_population(
        params["n_individuals"], params["samples_per_id"], params["feature_dim"], params["noise"], seed,
        prefix=prefix, id_offset=id_offset,
    )
    aug = params.get("augment")
    if aug:
        extra = []
        for s in data:
            extra.extend(augment(s, aug.get("image_shape"), aug.get("kinds", []), seed))
        data = data.concat(Dataset.from_samples(extra, data.feature_dim)) if extra else data
    return data


def cross_nonmembers(other: Dataset, splits: ExperimentSplits, seed) -> Dataset:
    """Attack non-members drawn from another population.

    Takes as many identities and pictures per identity as the regular
    attack non-member split, chosen by a seeded shuffle.
    """
    ref = splits.attack_nonmember
    if other.feature_dim != ref.feature_dim:
        raise ContractError(f"alternative non-members have {other.feature_dim} features, expected {ref.feature_dim}")
    known = {s for d in (splits.target_train, splits.target_val, splits.target_test, splits.eval_nonmember)
             for s in d.sample_ids}
    if known & set(other.sample_ids):
        raise ContractError("alternative non-members share sample ids with the experiment data")
    used = splits.target_train.identities | splits.eval_nonmember.identities
    if used & other.identities:
        raise ContractError("alternative non-member identities collide with target or evaluation identities")
    rng = substream(seed, "cross-nonmembers")
    n_ids, per_id = len(ref.identities), len(ref) // len(ref.identities)
    ids = rng.permutation(np.array(sorted(other.identities), dtype=np.int64))
    chosen = []
    for ident in ids:
        idx = np.flatnonzero(other.individual_ids == ident)
        if len(idx) < per_id:
            continue
        idx = idx[np.argsort([other.sample_ids[i] for i in idx], kind="stable")]
        chosen.extend(rng.permutation(idx)[:per_id].tolist())
        if len(chosen) == n_ids * per_id:
            break
    if len(chosen) < n_ids * per_id:
        raise ContractError(f"alternative population cannot supply {n_ids} identities with {per_id} pictures each")
    return other.take(np.array(chosen))


def _with_nonmembers(sp: ExperimentSplits, nonmembers: Dataset) -> ExperimentSplits:
    if nonmembers is sp.attack_nonmember:
        return sp
    from dataclasses import replace

    return replace(sp, attack_nonmember=nonmembers)


def write_timings(out_dir, timer: Timer):
    """Wall-clock per stage, kept apart from the report so reports stay reproducible."""
    path = Path(out_dir) / "timings.json"
    path.write_text(json.dumps({k: round(v, 6) for k, v in sorted(timer.stages.items())}, indent=2) + "\n",
                    encoding="utf-8")
