"""Run configuration files.

A run is described by one INI file (``configparser`` grammar: ``[section]``
headers, ``key = value`` lines, ``#`` or ``;`` comments, which may also follow a
value). Lists are comma separated. Recognised sections and keys, with their defaults::

    [run]        seed (required), out = run, jobs = 1
    [generate]   n_videos = 12, test_videos = 12, frames_per_video = 160,
                 n_classes = 3, tracks_per_video = 2, track_length = 100, 160,
                 segments_per_track = 0, 2, segment_length = 30, 60,
                 min_gap = 20, feature_dims = 8, 8, mean_scale = 1.0,
                 sigma = 1.0, jitter = 3, box_noise = 0.05, asymmetry = 0.0
    [train]      cell = gru, fusion = fusion_layer, hidden = 16, norm_dim = 16,
                 norm_activation = tanh, batch_size = 32, window = 20,
                 steps = 300, head_steps = (same as steps), lr = 0.001,
                 weight_decay = 0.0005, bptt = 20, split = train
    [localize]   method = threshold, theta = 0.1, median_window = 25,
                 nms_overlap = 0.2, top_k = 40, viterbi_alpha = 5.0, split = test
    [evaluate]   iou_thresholds = 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.75,
                 short_classes = auto   (auto | none | comma-separated ids),
                 assumptions = none     (none | all | comma-separated subset of
                                          classification, spatial, temporal),
                 assumption_iou = 0.75
    [paths]      data, model, scores, detections, results, curves
                 (default to fixed names under ``out``)

Command-line overrides use ``section.key=value``.
"""
from __future__ import annotations

import configparser
import itertools
from dataclasses import dataclass
from pathlib import Path

from .evaluation import ASSUMPTIONS, EvalConfig
from .localization import ConfigError, LocalizationConfig, ViterbiConfig
from .recurrent import TrainConfig
from .recurrent.cells import CELLS
from .recurrent.network import FUSION_MODES, NORM_ACTIVATIONS
from .synthetic import SpecError, SyntheticSpec, make_stream_asymmetric

DEFAULTS = {
    "run": {"out": "run", "jobs": "1"},
    "generate": {"n_videos": "12", "test_videos": "12", "frames_per_video": "160", "n_classes": "3",
                 "tracks_per_video": "2", "track_length": "100, 160", "segments_per_track": "0, 2",
                 "segment_length": "30, 60", "min_gap": "20", "feature_dims": "8, 8",
                 "mean_scale": "1.0", "sigma": "1.0", "jitter": "3", "box_noise": "0.05",
                 "asymmetry": "0.0"},
    "train": {"cell": "gru", "fusion": "fusion_layer", "hidden": "16", "norm_dim": "16",
              "norm_activation": "tanh", "batch_size": "32", "window": "20", "steps": "300",
              "head_steps": "", "lr": "0.001", "weight_decay": "0.0005", "bptt": "20",
              "split": "train"},
    "localize": {"method": "threshold", "theta": "0.1", "median_window": "25", "nms_overlap": "0.2",
                 "top_k": "40", "viterbi_alpha": "5.0", "split": "test"},
    "evaluate": {"iou_thresholds": "0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.75",
                 "short_classes": "auto", "assumptions": "none", "assumption_iou": "0.75"},
    "paths": {},
}


def _ints(text):
    return tuple(int(v) for v in text.split(",") if v.strip())


def _floats(text):
    return tuple(float(v) for v in text.split(",") if v.strip())


@dataclass
class RunConfig:
    parser: configparser.ConfigParser

    @classmethod
    def load(cls, path=None, overrides=(), seed=None, out=None, jobs=None) -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.read_dict(DEFAULTS)
        if path is not None:
            if not Path(path).is_file():
                raise ConfigError(f"config file {path} not found")
            try:
                cp.read(path)
            except configparser.Error as exc:
                raise ConfigError(f"{path}: {exc}") from exc
        for item in overrides:
            key, sep, value = item.partition("=")
            section, dot, option = key.strip().partition(".")
            if not sep or not dot:
                raise ConfigError(f"override {item!r} is not of the form section.key=value")
            if not cp.has_section(section):
                cp.add_section(section)
            cp.set(section, option, value.strip())
        for name, value in (("seed", seed), ("out", out), ("jobs", jobs)):
            if value is not None:
                cp.set("run", name, str(value))
        cfg = cls(cp)
        cfg.validate()
        return cfg

    def get(self, section, key) -> str:
        return self.parser.get(section, key)

    def validate(self):
        if not self.parser.get("run", "seed", fallback="").strip():
            raise ConfigError("a seed is required (set [run] seed or pass --seed)")
        try:
            self.seed
            self.jobs
            self.synthetic_spec()
            self.train_config()
            self.localization_config()
            self.viterbi_config()
            self.eval_config()
            self.assumptions
            self.check_model_choices()
        except (ValueError, SpecError) as exc:
            raise ConfigError(str(exc)) from exc

    def check_model_choices(self):
        t = self.parser["train"]
        for key, allowed in (("cell", tuple(CELLS)), ("fusion", FUSION_MODES),
                             ("norm_activation", NORM_ACTIVATIONS)):
            if t[key] not in allowed:
                raise ConfigError(f"[train] {key} must be one of {', '.join(allowed)}; got {t[key]!r}")

    @property
    def seed(self) -> int:
        return self.parser.getint("run", "seed")

    @property
    def jobs(self) -> int:
        jobs = self.parser.getint("run", "jobs")
        if jobs < 1:
            raise ConfigError("jobs must be at least 1")
        return jobs

    @property
    def out(self) -> Path:
        return Path(self.get("run", "out"))

    def path(self, name: str) -> Path:
        defaults = {"data": "data", "model": "model", "scores": "scores",
                    "detections": "detections.jsonl", "results": "results.csv", "curves": "curves"}
        raw = self.parser.get("paths", name, fallback="").strip()
        return Path(raw) if raw else self.out / defaults[name]

    def synthetic_spec(self, split_videos: str = "n_videos") -> SyntheticSpec:
        g = self.parser["generate"]
        spec = SyntheticSpec(
            n_videos=g.getint(split_videos), frames_per_video=g.getint("frames_per_video"),
            n_classes=g.getint("n_classes"), tracks_per_video=g.getint("tracks_per_video"),
            track_length=_ints(g["track_length"]), segments_per_track=_ints(g["segments_per_track"]),
            segment_length=_ints(g["segment_length"]), min_gap=g.getint("min_gap"),
            feature_dims=_ints(g["feature_dims"]), mean_scale=g.getfloat("mean_scale"),
            sigma=g.getfloat("sigma"), jitter=g.getint("jitter"), box_noise=g.getfloat("box_noise"),
            seed=self.seed)
        asym = g.getfloat("asymmetry")
        return make_stream_asymmetric(spec, asym) if asym else spec

    def train_config(self) -> TrainConfig:
        t = self.parser["train"]
        head = t.get("head_steps", "").strip()
        return TrainConfig(batch_size=t.getint("batch_size"), window=t.getint("window"),
                           steps=t.getint("steps"), head_steps=int(head) if head else None,
                           lr=t.getfloat("lr"), weight_decay=t.getfloat("weight_decay"),
                           bptt=t.getint("bptt"), seed=self.seed)

    def localization_config(self) -> LocalizationConfig:
        s = self.parser["localize"]
        if s["method"] not in ("threshold", "viterbi"):
            raise ConfigError(f"unknown localization method {s['method']!r}")
        return LocalizationConfig(theta=s.getfloat("theta"), median_window=s.getint("median_window"),
                                  nms_overlap=s.getfloat("nms_overlap"), top_k=s.getint("top_k"))

    def viterbi_config(self) -> ViterbiConfig:
        return ViterbiConfig(alpha=self.parser.getfloat("localize", "viterbi_alpha"))

    def eval_config(self, class_subset=None) -> EvalConfig:
        return EvalConfig(_floats(self.get("evaluate", "iou_thresholds")), class_subset)

    @property
    def short_classes(self):
        raw = self.get("evaluate", "short_classes").strip().lower()
        if raw in ("auto", "none", ""):
            return raw or "none"
        return _ints(raw)

    @property
    def assumptions(self) -> list[tuple[str, ...]]:
        """Assumption sets to report; every combination of the listed ones."""
        raw = self.get("evaluate", "assumptions").strip().lower()
        if raw in ("", "none"):
            return []
        names = ASSUMPTIONS if raw == "all" else tuple(v.strip() for v in raw.split(","))
        bad = set(names) - set(ASSUMPTIONS)
        if bad:
            raise ConfigError(f"unknown assumptions {sorted(bad)}")
        return [combo for r in range(len(names) + 1) for combo in itertools.combinations(names, r)]
