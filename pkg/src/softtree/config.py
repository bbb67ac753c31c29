"""Line-based run configuration: ``dotted.key = value`` text.

Values are plain scalars, on/off booleans, or comma-separated lists, so
configs diff cleanly and round-trip bit-exactly.  ``parse_config`` and
``format_config`` are inverses at the value level: parse(format(parse(t)))
equals parse(t) for any valid t.  The ``plan.preset`` key is a parse-time
macro (applied before any other plan key) and is never emitted.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .backbone import DeskBackboneSpec
from .data import AugmentPolicy
from .errors import ConfigError
from .training import StagePlan, TrainPlan, desk_plan, paper_plan
from .tree import TreeConfig


@dataclass
class RunConfig:
    seed: int = 7
    precision: str = "float32"
    out: str = "run-output"

    tree_height: int = 3
    tree_channels: tuple = ()          # empty -> backbone width then 16 per level
    tree_dilations: tuple = (1, 2, 3, 4)
    tree_edge_mode: str = "asymmetric"
    tree_routing_pool: str = "gap"
    tree_gc_block: bool = True
    tree_attention: bool = True
    tree_aspp: bool = True
    tree_classes: int = 0              # 0 -> inferred from the dataset

    backbone_widths: tuple = (16, 32, 32)
    backbone_input_side: int = 32
    backbone_input_channels: int = 3
    backbone_params: str = ""          # optional tensor-table file to import

    plan: TrainPlan = field(default_factory=desk_plan)

    data_root: str = ""
    data_synthetic_classes: int = 4
    data_synthetic_per_class: int = 50
    data_synthetic_side: int = 32
    data_synthetic_seed: int = 0
    data_class_names: tuple = ()
    data_stats_mean: tuple = ()
    data_stats_std: tuple = ()

    augment_resize_shorter: int = 36
    augment_crop: int = 32
    augment_hflip: float = 0.5

    completed_stages: int = 0

    # -- derived builders --------------------------------------------------
    def backbone_spec(self) -> DeskBackboneSpec:
        return DeskBackboneSpec(in_channels=self.backbone_input_channels,
                                in_side=self.backbone_input_side,
                                widths=tuple(self.backbone_widths))

    def tree_config(self, num_classes: int) -> TreeConfig:
        c_bb = self.backbone_spec().out_shape()[0]
        channels = tuple(self.tree_channels) or \
            (c_bb,) + (16,) * (self.tree_height - 1)
        return TreeConfig(height=self.tree_height, num_classes=num_classes,
                          channels=channels, dilations=tuple(self.tree_dilations),
                          edge_mode=self.tree_edge_mode,
                          routing_pool=self.tree_routing_pool,
                          gc_block=self.tree_gc_block,
                          attention=self.tree_attention, aspp=self.tree_aspp)

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(resize_shorter=self.augment_resize_shorter,
                             crop=self.augment_crop, hflip_prob=self.augment_hflip)

    def train_plan(self) -> TrainPlan:
        return replace(self.plan, seed=self.seed, precision=self.precision)


# ---------------------------------------------------------------------------
# value parsers / serializers
# ---------------------------------------------------------------------------

def _parse_bool(v: str) -> bool:
    low = v.lower()
    if low in ("on", "true", "1", "yes"):
        return True
    if low in ("off", "false", "0", "no"):
        return False
    raise ValueError(f"expected on/off, got {v!r}")


def _fmt_bool(v: bool) -> str:
    return "on" if v else "off"


def _parse_ints(v: str) -> tuple:
    return tuple(int(t.strip()) for t in v.split(",") if t.strip()) if v.strip() else ()


def _parse_floats(v: str) -> tuple:
    return tuple(float(t.strip()) for t in v.split(",") if t.strip()) if v.strip() else ()


def _parse_strs(v: str) -> tuple:
    return tuple(t.strip() for t in v.split(",") if t.strip()) if v.strip() else ()


def _fmt_list(v) -> str:
    return ",".join(repr(x) if isinstance(x, float) else str(x) for x in v)


_SCALAR = {
    "int": (int, str),
    "float": (float, repr),
    "str": (lambda s: s, lambda s: s),
    "bool": (_parse_bool, _fmt_bool),
    "ints": (_parse_ints, _fmt_list),
    "floats": (_parse_floats, _fmt_list),
    "strs": (_parse_strs, _fmt_list),
}

# key -> (RunConfig attribute, value kind)
_FIELD_KEYS = {
    "seed": ("seed", "int"),
    "precision": ("precision", "str"),
    "out": ("out", "str"),
    "tree.height": ("tree_height", "int"),
    "tree.channels": ("tree_channels", "ints"),
    "tree.dilations": ("tree_dilations", "ints"),
    "tree.edge_mode": ("tree_edge_mode", "str"),
    "tree.routing_pool": ("tree_routing_pool", "str"),
    "tree.gc_block": ("tree_gc_block", "bool"),
    "tree.attention": ("tree_attention", "bool"),
    "tree.aspp": ("tree_aspp", "bool"),
    "tree.classes": ("tree_classes", "int"),
    "backbone.widths": ("backbone_widths", "ints"),
    "backbone.input_side": ("backbone_input_side", "int"),
    "backbone.input_channels": ("backbone_input_channels", "int"),
    "backbone.params": ("backbone_params", "str"),
    "data.root": ("data_root", "str"),
    "data.synthetic.classes": ("data_synthetic_classes", "int"),
    "data.synthetic.per_class": ("data_synthetic_per_class", "int"),
    "data.synthetic.side": ("data_synthetic_side", "int"),
    "data.synthetic.seed": ("data_synthetic_seed", "int"),
    "data.class_names": ("data_class_names", "strs"),
    "data.stats.mean": ("data_stats_mean", "floats"),
    "data.stats.std": ("data_stats_std", "floats"),
    "augment.resize_shorter": ("augment_resize_shorter", "int"),
    "augment.crop": ("augment_crop", "int"),
    "augment.hflip": ("augment_hflip", "float"),
    "train.completed_stages": ("completed_stages", "int"),
}

_STAGE_KEYS = {
    "freeze": ("freeze_backbone", "bool"),
    "epochs": ("epochs", "int"),
    "batch_size": ("batch_size", "int"),
    "lr": ("lr", "float"),
    "lr_divisor": ("lr_divisor", "float"),
    "milestones": ("milestones", "ints"),
    "weight_decay": ("weight_decay", "float"),
}

_PRESETS = {"desk": desk_plan, "paper": paper_plan}


def _known_keys():
    keys = set(_FIELD_KEYS) | {"plan.momentum", "plan.preset"}
    for s in (1, 2):
        keys |= {f"plan.stage{s}.{k}" for k in _STAGE_KEYS}
    return keys


def parse_config(text: str) -> RunConfig:
    lines = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        lines.append((lineno, key.strip(), value.strip()))

    known = _known_keys()
    for lineno, key, _ in lines:
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown key '{key}'")

    cfg = RunConfig()
    stage_fields = [dict(vars(s)) for s in cfg.plan.stages]
    momentum = cfg.plan.momentum

    # preset applies first regardless of its position in the file
    for lineno, key, value in lines:
        if key == "plan.preset":
            if value not in _PRESETS:
                raise ConfigError(f"line {lineno}: unknown plan preset '{value}'")
            preset = _PRESETS[value]()
            stage_fields = [dict(vars(s)) for s in preset.stages]
            momentum = preset.momentum

    for lineno, key, value in lines:
        try:
            if key == "plan.preset":
                continue
            elif key == "plan.momentum":
                momentum = float(value)
            elif key.startswith("plan.stage"):
                _, stage_name, fieldname = key.split(".", 2)
                idx = int(stage_name.removeprefix("stage")) - 1
                attr, kind = _STAGE_KEYS[fieldname]
                stage_fields[idx][attr] = _SCALAR[kind][0](value)
            else:
                attr, kind = _FIELD_KEYS[key]
                setattr(cfg, attr, _SCALAR[kind][0](value))
        except (ValueError, IndexError) as exc:
            raise ConfigError(f"line {lineno}: bad value for '{key}': {exc}") from None

    cfg.plan = TrainPlan(stages=tuple(StagePlan(**f) for f in stage_fields),
                         momentum=momentum, seed=cfg.seed, precision=cfg.precision)
    return cfg


def format_config(cfg: RunConfig) -> str:
    out = []
    for key, (attr, kind) in _FIELD_KEYS.items():
        out.append(f"{key} = {_SCALAR[kind][1](getattr(cfg, attr))}")
    out.append(f"plan.momentum = {cfg.plan.momentum!r}")
    for s, stage in enumerate(cfg.plan.stages, start=1):
        for fieldname, (attr, kind) in _STAGE_KEYS.items():
            out.append(f"plan.stage{s}.{fieldname} = "
                       f"{_SCALAR[kind][1](getattr(stage, attr))}")
    return "\n".join(out) + "\n"


def load_config(path) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config(f.read())
