"""Binary checkpoint format (little-endian throughout).

    magic      4 bytes  b"APEX"
    version    u32
    config     u32 byte length + UTF-8 ``key=value`` lines
    records    until EOF, each:
                 u32 name length, UTF-8 name,
                 u8 dtype code (0 f32, 1 f64, 2 i64),
                 u32 ndim, ndim x u64 dims,
                 raw data

Records are written sorted by name and looked up by name on load.
"""

from __future__ import annotations

import os
import re
import struct
import tempfile
from dataclasses import dataclass, field

import numpy as np

from ..assessment import ActivationLedger, ModuleStats
from ..expansion import ExpansionOperator, MonarchMatrix, OperatorBundle
from ..model import ModelConfig, ModelParams, param_shapes
from ..staging import OptimizerState, StagePlan

MAGIC = b"APEX"
VERSION = 1
DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8")}
CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1, np.dtype("int64"): 2}

_OP_RE = re.compile(r"^layer(\d+)\.op\.([VOUGD])\.(Dfactor|Rfactor|dense|P|N)$")
_LEDGER_RE = re.compile(r"^ledger\.layer(\d+)\.(mha|ffn)\.(scores|norm_sum|count)$")


class FormatError(ValueError):
    pass


@dataclass
class CheckpointState:
    cfg: ModelConfig
    params: ModelParams
    operators: OperatorBundle | None = None
    ledger: ActivationLedger | None = None
    plan: StagePlan | None = None
    optimizer: OptimizerState | None = None
    meta: dict[str, str] = field(default_factory=dict)


def _config_lines(state: CheckpointState) -> str:
    items = [(f"model.{k}", v) for k, v in state.cfg.to_dict().items()]
    if state.plan is not None:
        items += [(f"plan.{k}", v) for k, v in state.plan.to_dict().items()]
    if state.ledger is not None:
        items += [("ledger.k_mha", state.ledger.k_mha), ("ledger.k_ffn", state.ledger.k_ffn)]
    if state.optimizer is not None:
        o = state.optimizer
        items += [("opt.lr", o.lr), ("opt.beta1", o.beta1), ("opt.beta2", o.beta2), ("opt.eps", o.eps),
                  ("opt.weight_decay", o.weight_decay), ("opt.step", o.step),
                  ("opt.no_decay", ",".join(sorted(o.no_decay)))]
    items += sorted(state.meta.items())
    lines = []
    for k, v in items:
        text = repr(v) if isinstance(v, float) else str(v)
        if "\n" in text or "=" in k:
            raise FormatError(f"config entry {k!r} cannot be encoded as a key=value line")
        lines.append(f"{k}={text}")
    return "\n".join(lines) + ("\n" if lines else "")


def _records(state: CheckpointState) -> dict[str, np.ndarray]:
    rec = dict(state.params.tensors)
    if state.operators is not None:
        for op in state.operators.live():
            rec.update(op.named_arrays())
            rec[f"{op.prefix}.P"] = np.asarray(op.pos, dtype=np.int64)
            rec[f"{op.prefix}.N"] = np.asarray(op.neg, dtype=np.int64)
    if state.ledger is not None:
        for (layer, kind), m in state.ledger.modules.items():
            base = f"ledger.layer{layer}.{kind}"
            rec[base + ".scores"] = m.scores.astype(np.int64)
            rec[base + ".norm_sum"] = m.norm_sum.astype(np.float64)
            rec[base + ".count"] = np.array(m.count, dtype=np.int64)
    if state.optimizer is not None:
        for k, v in state.optimizer.m.items():
            rec[f"opt.m.{k}"] = v
        for k, v in state.optimizer.v.items():
            rec[f"opt.v.{k}"] = v
    return rec


def dumps(state: CheckpointState) -> bytes:
    out = [MAGIC, struct.pack("<I", VERSION)]
    blob = _config_lines(state).encode("utf-8")
    out.append(struct.pack("<I", len(blob)))
    out.append(blob)
    for name, arr in sorted(_records(state).items()):
        arr = np.asarray(arr)
        if arr.dtype not in CODES:
            raise FormatError(f"record {name!r}: unsupported dtype {arr.dtype}")
        nb = name.encode("utf-8")
        out.append(struct.pack("<I", len(nb)))
        out.append(nb)
        out.append(struct.pack("<BI", CODES[arr.dtype], arr.ndim))
        out.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        out.append(np.ascontiguousarray(arr, dtype=DTYPES[CODES[arr.dtype]]).tobytes())
    return b"".join(out)


def save_checkpoint(path, params: ModelParams, operators=None, ledger=None, plan=None, optimizer=None,
                    meta: dict | None = None) -> None:
    """Write atomically: temp file in the target directory, then rename."""
    state = CheckpointState(params.cfg, params, operators, ledger, plan, optimizer, dict(meta or {}))
    payload = dumps(state)
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated {what}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    @property
    def done(self) -> bool:
        return self.pos >= len(self.buf)


def loads(buf: bytes) -> CheckpointState:
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise FormatError("bad magic: not an APEX checkpoint")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    (blen,) = r.unpack("<I", "config length")
    try:
        text = r.take(blen, "config blob").decode("utf-8")
    except UnicodeDecodeError as e:
        raise FormatError("config blob is not valid UTF-8") from e
    conf = {}
    for line in text.splitlines():
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"malformed config line {line!r}")
        k, v = line.split("=", 1)
        conf[k] = v

    records: dict[str, np.ndarray] = {}
    index = 0
    while not r.done:
        label = f"record #{index}"
        (nlen,) = r.unpack("<I", f"{label} name length")
        name = r.take(nlen, f"{label} name").decode("utf-8", errors="replace")
        label = f"record {name!r}"
        code, ndim = r.unpack("<BI", f"{label} header")
        if code not in DTYPES:
            raise FormatError(f"{label}: unknown dtype code {code}")
        dims = r.unpack(f"<{ndim}Q", f"{label} dims")
        dt = DTYPES[code]
        count = int(np.prod(dims, dtype=np.int64)) if ndim else 1
        raw = r.take(count * dt.itemsize, f"{label} data")
        records[name] = np.frombuffer(raw, dtype=dt).reshape(dims).astype(dt.newbyteorder("="))
        index += 1
    return _assemble(conf, records)


def _assemble(conf: dict[str, str], records: dict[str, np.ndarray]) -> CheckpointState:
    cfg = ModelConfig.from_dict({k[6:]: v for k, v in conf.items() if k.startswith("model.")})
    tensors = {}
    for name, shape in param_shapes(cfg).items():
        if name not in records:
            raise FormatError(f"missing parameter record {name!r}")
        arr = records.pop(name)
        if arr.shape != shape:
            raise FormatError(f"record {name!r}: shape {arr.shape}, expected {shape}")
        if arr.dtype.kind != "f":
            raise FormatError(f"record {name!r}: dtype mismatch ({arr.dtype}, expected float)")
        tensors[name] = arr
    params = ModelParams(cfg, tensors)

    plan_keys = {k[5:]: v for k, v in conf.items() if k.startswith("plan.")}
    plan = StagePlan.from_dict(plan_keys) if plan_keys else None

    ops: dict[tuple[int, str], dict[str, np.ndarray]] = {}
    ledger_parts: dict[tuple[int, str], dict[str, np.ndarray]] = {}
    opt_m, opt_v = {}, {}
    for name in list(records):
        mo = _OP_RE.match(name)
        ml = _LEDGER_RE.match(name)
        if mo:
            ops.setdefault((int(mo.group(1)), mo.group(2)), {})[mo.group(3)] = records.pop(name)
        elif ml:
            ledger_parts.setdefault((int(ml.group(1)), ml.group(2)), {})[ml.group(3)] = records.pop(name)
        elif name.startswith("opt.m."):
            opt_m[name[6:]] = records.pop(name)
        elif name.startswith("opt.v."):
            opt_v[name[6:]] = records.pop(name)
    if records:
        raise FormatError(f"unrecognized record {sorted(records)[0]!r}")

    bundle = None
    if ops:
        bundle = OperatorBundle()
        order = {c: i for i, c in enumerate("VOUGD")}
        for (layer, letter), parts in sorted(ops.items(), key=lambda kv: (kv[0][0], order[kv[0][1]])):
            label = f"layer{layer}.op.{letter}"
            for key in ("P", "N"):
                if key not in parts or parts[key].dtype != np.int64:
                    raise FormatError(f"record {label}.{key}: missing or dtype mismatch")
            n = len(parts["P"])
            if "dense" in parts:
                m = MonarchMatrix(n, 0, dense=parts["dense"], fallback=True)
            elif "Dfactor" in parts and "Rfactor" in parts:
                d = parts["Dfactor"].shape[0]
                m = MonarchMatrix(n, d, dfac=parts["Dfactor"], rfac=parts["Rfactor"])
            else:
                raise FormatError(f"record {label}: incomplete Monarch factors")
            bundle.operators.append(ExpansionOperator(layer, letter, parts["P"], parts["N"], m))

    ledger = None
    if ledger_parts:
        ledger = ActivationLedger(cfg.n_layers, cfg.n_heads, cfg.d_ffn,
                                  float(conf.get("ledger.k_mha", 0.125)), float(conf.get("ledger.k_ffn", 0.125)))
        for key, parts in ledger_parts.items():
            try:
                ledger.modules[key] = ModuleStats(parts["scores"], parts["norm_sum"], int(parts["count"]))
            except KeyError as e:
                raise FormatError(f"record ledger.layer{key[0]}.{key[1]}: missing {e.args[0]}") from None

    optimizer = None
    if "opt.step" in conf:
        nd = conf.get("opt.no_decay", "")
        optimizer = OptimizerState(lr=float(conf["opt.lr"]), beta1=float(conf["opt.beta1"]),
                                   beta2=float(conf["opt.beta2"]), eps=float(conf["opt.eps"]),
                                   weight_decay=float(conf["opt.weight_decay"]),
                                   no_decay=set(nd.split(",")) if nd else set(),
                                   m=opt_m, v=opt_v, step=int(conf["opt.step"]))

    meta = {k: v for k, v in conf.items() if not k.startswith(("model.", "plan.", "ledger.", "opt."))}
    return CheckpointState(cfg, params, bundle, ledger, plan, optimizer, meta)


def load_checkpoint(path) -> CheckpointState:
    with open(path, "rb") as fh:
        return loads(fh.read())
