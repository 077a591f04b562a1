"""JSON scene configuration: parsing, default filling, validation, and object construction."""
from __future__ import annotations

import copy
import dataclasses
import json
from pathlib import Path

import numpy as np

from . import meshes
from .antenna import AntennaArray, RadiationPattern, preset
from .geometry.mesh import MeshError, TriangleMesh, load_obj
from .geometry.transform import rotation_matrix
from .ifsignal import ChirpConfig, ChirpError
from .imaging import CFARConfig
from .reconstruct import ObjectSpec, OptConfig, Renderer, SceneParams
from .rfmaterial import RFMaterial, UnknownMaterial, lookup
from .tracer import TraceConfig


class ConfigError(ValueError):
    """Invalid configuration; ``field`` is the dotted path of the offending entry."""

    def __init__(self, msg: str, field: str = ""):
        super().__init__(f"{field}: {msg}" if field else msg)
        self.field = field


def _fields(cls) -> dict:
    return {f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
            for f in dataclasses.fields(cls)}



DEFAULTS = {
    "seed": 0,
    "radar": {
        "preset": "awr1843",
        "pattern": {"kind": "cosine_power", "exponent": 1.0},
        "chirp": {},
        "tx_positions": None,
        "rx_positions": None,
        "position": [0.0, 0.0, 0.0],
        "rotation": [0.0, 0.0, 0.0],
    },
    "objects": [],
    "templates": None,
    "trace": {k: v for k, v in _fields(TraceConfig).items() if k != "rng_seed"},
    "imaging": {"dims": None, "window": "hann", "cfar": _fields(CFARConfig)},
    "optimizer": {k: v for k, v in _fields(OptConfig).items() if k != "seed"},
    "noise": {"snr_db": None},
    "evaluate": {"resolution": 64, "tolerances": [0.05, 0.1, 0.2]},
    "gradcheck": {"step": 1e-7, "tolerance": 1e-3, "smooth": True},
}

OBJECT_DEFAULTS = {
    "name": None,
    "mesh": None,
    "mesh_args": {},
    "material": "metal",
    "pose": {"translation": [0.0, 0.0, 0.0], "rotation": [0.0, 0.0, 0.0], "scale": 1.0},
    "truth_pose": None,
    "free": [],
    "displacement": False,
    "displacement_weight": 0.1,
}


def _merge(base, over, path=""):
    """Recursive default filling; unknown keys are errors."""
    if not isinstance(base, dict) or not isinstance(over, dict):
        return copy.deepcopy(over)
    out = copy.deepcopy(base)
    for k, v in over.items():
        here = f"{path}.{k}" if path else k
        if k not in base:
            raise ConfigError("unknown key", here)
        if isinstance(base[k], dict) and base[k] and isinstance(v, dict) and k not in ("chirp", "mesh_args"):
            out[k] = _merge(base[k], v, here)
        else:
            out[k] = copy.deepcopy(v)
    return out


def _pose(d, path):
    pose = _merge(OBJECT_DEFAULTS["pose"], d or {}, path)
    for key in ("translation", "rotation"):
        if len(pose[key]) != 3:
            raise ConfigError("expected 3 components", f"{path}.{key}")
    if not pose["scale"] > 0:
        raise ConfigError("scale must be positive", f"{path}.scale")
    pose["translation"] = [float(x) for x in pose["translation"]]
    pose["rotation"] = [float(x) for x in pose["rotation"]]
    pose["scale"] = float(pose["scale"])
    return pose


def _normalize_object(o, i, base_dir, kind="objects"):
    path = f"{kind}[{i}]"
    obj = _merge(OBJECT_DEFAULTS, o, path)
    if obj["mesh"] is None:
        raise ConfigError("a mesh is required", f"{path}.mesh")
    mesh = str(obj["mesh"])
    if not mesh.startswith("builtin:"):
        p = Path(mesh)
        if not p.is_absolute():
            p = (base_dir / p).resolve()
        if not p.is_file():
            raise ConfigError(f"mesh file not found: {p}", f"{path}.mesh")
        obj["mesh"] = str(p)
    elif mesh.split(":", 1)[1] not in meshes.BUILTIN:
        raise ConfigError(f"unknown builtin mesh {mesh!r}", f"{path}.mesh")
    if obj["name"] is None:
        obj["name"] = Path(mesh.split(":", 1)[-1]).stem + (f"{i}" if i else "")
    obj["pose"] = _pose(obj["pose"], f"{path}.pose")
    if obj["truth_pose"] is not None:
        obj["truth_pose"] = _pose(obj["truth_pose"], f"{path}.truth_pose")
    obj["free"] = list(obj["free"])
    return obj


class SceneConfig:
    """Default-filled, validated configuration with builders for runtime objects."""

    def __init__(self, data: dict, base_dir=".", validate: bool = True):
        base_dir = Path(base_dir)
        if not isinstance(data, dict):
            raise ConfigError("configuration must be a JSON object")
        d = _merge(DEFAULTS, data)
        d["objects"] = [_normalize_object(o, i, base_dir) for i, o in enumerate(d["objects"])]
        if d["templates"] is not None:
            d["templates"] = [_normalize_object(o, i, base_dir, "templates")
                              for i, o in enumerate(d["templates"])]
        if d["imaging"]["dims"] is not None:
            d["imaging"]["dims"] = [int(x) for x in d["imaging"]["dims"]]
        d["seed"] = int(d["seed"])
        self.data = d
        if validate:
            self.validate()

    @classmethod
    def load(cls, path) -> "SceneConfig":
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", "config") from exc
        except ValueError as exc:
            raise ConfigError(f"invalid JSON: {exc}", "config") from exc
        return cls(data, path.parent)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dumps(self) -> str:
        return json.dumps(self.data, indent=2, sort_keys=True) + "\n"

    def with_overrides(self, **kw) -> "SceneConfig":
        d = self.to_dict()
        if kw.get("seed") is not None:
            d["seed"] = int(kw["seed"])
        if kw.get("max_iters") is not None:
            d["optimizer"]["max_iters"] = int(kw["max_iters"])
        if kw.get("dims") is not None:
            d["imaging"]["dims"] = list(kw["dims"])
        return SceneConfig(d)

    # ----------------------------------------------------------- builders

    @property
    def seed(self) -> int:
        return self.data["seed"]

    def radar(self) -> tuple[AntennaArray, ChirpConfig]:
        r = self.data["radar"]
        try:
            pattern = RadiationPattern(**r["pattern"])
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "radar.pattern") from exc
        try:
            array, chirp = preset(r["preset"], pattern)
        except KeyError as exc:
            raise ConfigError(str(exc.args[0]), "radar.preset") from exc
        if r["chirp"]:
            cd = chirp.to_dict()
            for k, v in r["chirp"].items():
                if k not in cd:
                    raise ConfigError("unknown chirp field", f"radar.chirp.{k}")
                cd[k] = v
            chirp = ChirpConfig.from_dict(cd)
        tx = array.tx_positions if r["tx_positions"] is None else r["tx_positions"]
        rx = array.rx_positions if r["rx_positions"] is None else r["rx_positions"]
        rot = rotation_matrix(np.asarray(r["rotation"], float)).value
        try:
            array = AntennaArray(tx, rx, pattern, rot, r["position"])
        except ValueError as exc:
            raise ConfigError(str(exc), "radar") from exc
        return array, chirp

    def trace_config(self, smooth: bool = False) -> TraceConfig:
        t = dict(self.data["trace"])
        t["rng_seed"] = self.seed
        if smooth:
            t["hard_forward"] = False
        try:
            return TraceConfig(**t)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "trace") from exc

    def opt_config(self) -> OptConfig:
        o = dict(self.data["optimizer"])
        for k in ("betas", "phase_fractions"):
            o[k] = tuple(o[k])
        try:
            return OptConfig(seed=self.seed, **o)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc), "optimizer") from exc

    def cfar(self) -> CFARConfig:
        return CFARConfig(**self.data["imaging"]["cfar"])

    def renderer(self, smooth: bool = False) -> Renderer:
        array, chirp = self.radar()
        im = self.data["imaging"]
        dims = tuple(im["dims"]) if im["dims"] is not None else None
        return Renderer(array, chirp, self.trace_config(smooth), dims, im["window"])

    @staticmethod
    def _mesh(obj) -> TriangleMesh:
        m = obj["mesh"]
        if m.startswith("builtin:"):
            return meshes.BUILTIN[m.split(":", 1)[1]](**obj["mesh_args"])
        return load_obj(m)

    @staticmethod
    def _material(spec, path) -> RFMaterial:
        if isinstance(spec, str):
            try:
                return lookup(spec)
            except UnknownMaterial as exc:
                raise ConfigError(str(exc.args[0]), path) from exc
        if isinstance(spec, dict):
            try:
                return RFMaterial(spec.get("name", "custom"), float(spec["eps_r"]), float(spec["sigma"]))
            except (KeyError, TypeError, ValueError) as exc:
                raise ConfigError(f"inline material needs eps_r and sigma ({exc})", path) from exc
        raise ConfigError("material must be a name or an object", path)

    def object_specs(self, which: str = "pose", kind: str = "objects") -> list[ObjectSpec]:
        specs = []
        for i, o in enumerate(self.data[kind] or []):
            pose = o["truth_pose"] if which == "truth" and o["truth_pose"] is not None else o["pose"]
            try:
                mesh = self._mesh(o)
            except (MeshError, OSError, TypeError) as exc:
                raise ConfigError(str(exc), f"{kind}[{i}].mesh") from exc
            specs.append(ObjectSpec(o["name"], mesh, self._material(o["material"], f"{kind}[{i}].material"),
                                    tuple(pose["translation"]), tuple(pose["rotation"]), pose["scale"],
                                    tuple(o["free"]), bool(o["displacement"]), float(o["displacement_weight"])))
        return specs

    def params(self, which: str = "pose", kind: str = "objects") -> SceneParams:
        try:
            return SceneParams(self.object_specs(which, kind))
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(str(exc), f"{kind}[].free") from exc

    def template_params(self) -> list[SceneParams]:
        """One single-object parameter set per template, posed like ``objects[0]``."""
        base = self.data["objects"][0]
        out = []
        for i, t in enumerate(self.data["templates"] or []):
            o = dict(t)
            o["pose"], o["free"] = base["pose"], t["free"] or base["free"]
            spec = SceneConfig._spec_from(o, f"templates[{i}]")
            out.append(SceneParams([spec]))
        return out

    @staticmethod
    def _spec_from(o, path) -> ObjectSpec:
        pose = o["pose"]
        return ObjectSpec(o["name"], SceneConfig._mesh(o), SceneConfig._material(o["material"], f"{path}.material"),
                          tuple(pose["translation"]), tuple(pose["rotation"]), pose["scale"], tuple(o["free"]),
                          bool(o["displacement"]), float(o["displacement_weight"]))

    # --------------------------------------------------------- validation

    def max_range(self) -> float:
        """Farthest object point from the radar over the initial and truth poses."""
        array, _ = self.radar()
        far = 0.0
        for kind in ("objects", "templates"):
            for o in self.data[kind] or []:
                mesh = self._mesh(o)
                c = mesh.vertices.mean(axis=0)
                rad = float(np.max(np.linalg.norm(mesh.vertices - c, axis=1)))
                for pose in (o["pose"], o["truth_pose"]):
                    if pose is None:
                        continue
                    centre = np.asarray(pose["translation"]) + pose["scale"] * c
                    far = max(far, float(np.linalg.norm(centre - array.position)) + pose["scale"] * rad)
        return far

    def validate(self):
        array, chirp = self.radar()
        if not self.data["objects"]:
            raise ConfigError("at least one object is required", "objects")
        names = [o["name"] for o in self.data["objects"]]
        if len(set(names)) != len(names):
            raise ConfigError(f"duplicate object names {names}", "objects")
        for kind in ("objects", "templates"):
            for i, o in enumerate(self.data[kind] or []):
                self._material(o["material"], f"{kind}[{i}].material")
        self.params()
        if self.data["templates"]:
            self.template_params()
        try:
            chirp.validate(self.max_range())
        except ChirpError as exc:
            raise ConfigError(str(exc), f"radar.chirp.{exc.field}") from exc
        self.trace_config()
        self.opt_config()
        try:
            self.cfar()
        except TypeError as exc:
            raise ConfigError(str(exc), "imaging.cfar") from exc
        if self.data["imaging"]["window"] not in ("hann", "rect"):
            raise ConfigError("unknown window", "imaging.window")
        snr = self.data["noise"]["snr_db"]
        if snr is not None and not isinstance(snr, (int, float)):
            raise ConfigError("snr_db must be a number or null", "noise.snr_db")
        return self
