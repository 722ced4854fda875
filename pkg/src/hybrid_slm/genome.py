"""Three-stage hybrid search space, decoding to flat operator lists, and presets.

A stage repeats one building block ``n_blocks`` times. A block holds one or two
mixer kinds in a ratio (``0:1`` means ``op_a`` alone; ``1:k`` emits
``op_a`` then ``k`` copies of ``op_b``), and every mixer is followed by
``ffn`` FFNs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from pathlib import Path

from .operators.kinds import FFN, AttentionConfig, OperatorKind

RATIOS = ("0:1", "1:1", "1:2", "1:3")
FFN_CHOICES = (0, 1, 2)
MAX_OPERATORS = 30
FULL_SCALE_LADDER = (1024, 1280, 1536, 1792, 2048, 2304, 2560)
DESK_LADDER = (32, 48, 64, 96, 128)
DEFAULT_META_TOKENS = 256
BYTE_VOCAB = 256


class GenomeError(ValueError):
    pass


@dataclass(frozen=True)
class StageSpec:
    op_a: str
    op_b: str | None = None
    ratio: str = "0:1"
    ffn: int = 1
    blocks: int = 1

    def validate(self) -> None:
        if self.ratio not in RATIOS:
            raise GenomeError(f"ratio {self.ratio!r} not in {RATIOS}")
        if (self.ratio == "0:1") != (self.op_b is None):
            raise GenomeError(f"ratio 0:1 iff op_b absent (got ratio={self.ratio}, op_b={self.op_b})")
        if self.op_b is not None and self.op_b == self.op_a:
            raise GenomeError(f"op_a and op_b must differ, both {self.op_a!r}")
        for code in (self.op_a, self.op_b):
            if code is not None and not OperatorKind.from_code(code).is_mixer:
                raise GenomeError(f"{code!r} is not a token mixer")
        if self.ffn not in FFN_CHOICES:
            raise GenomeError(f"ffn per mixer must be one of {FFN_CHOICES}, got {self.ffn}")
        if self.blocks < 0:
            raise GenomeError(f"n_blocks must be >= 0, got {self.blocks}")

    def block_mixers(self) -> list[str]:
        if self.op_b is None:
            return [self.op_a]
        return [self.op_a] + [self.op_b] * int(self.ratio.split(":")[1])

    def block_codes(self) -> list[str]:
        out = []
        for m in self.block_mixers():
            out.append(m)
            out.extend(["f"] * self.ffn)
        return out

    def n_operators(self) -> int:
        return len(self.block_codes()) * self.blocks


@dataclass(frozen=True)
class ArchitectureGenome:
    stages: tuple[StageSpec, StageSpec, StageSpec]
    hidden: int = 64
    meta_tokens: int = 0
    max_operators: int = MAX_OPERATORS
    window: int | None = None

    def n_operators(self) -> int:
        return sum(s.n_operators() for s in self.stages)

    def with_hidden(self, hidden: int) -> "ArchitectureGenome":
        return replace(self, hidden=hidden)

    def key(self) -> tuple:
        """Identity of the searchable factors (hidden size is derived, so excluded)."""
        return tuple((s.op_a, s.op_b, s.ratio, s.ffn, s.blocks) for s in self.stages)

    def validate(self) -> None:
        if len(self.stages) != 3:
            raise GenomeError(f"exactly 3 stages required, got {len(self.stages)}")
        for s in self.stages:
            s.validate()
        if self.meta_tokens < 0:
            raise GenomeError("meta_tokens must be >= 0")
        n = self.n_operators()
        if n == 0:
            raise GenomeError("genome decodes to an empty model (all stages have 0 blocks)")
        if n > self.max_operators:
            raise GenomeError(f"{n} operators exceed the cap of {self.max_operators} by {n - self.max_operators}")

    def codes(self) -> list[str]:
        out = []
        for s in self.stages:
            out.extend(s.block_codes() * s.blocks)
        return out

    # -- serialization
    def to_dict(self) -> dict:
        return {
            "stages": [{"op_a": s.op_a, "op_b": s.op_b, "ratio": s.ratio, "ffn": s.ffn, "blocks": s.blocks}
                       for s in self.stages],
            "hidden": self.hidden,
            "meta_tokens": self.meta_tokens,
            "max_operators": self.max_operators,
            "window": self.window,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureGenome":
        stages = tuple(StageSpec(s["op_a"], s.get("op_b"), s.get("ratio", "0:1"), int(s.get("ffn", 1)),
                                 int(s.get("blocks", 1))) for s in d["stages"])
        return cls(stages, int(d.get("hidden", 64)), int(d.get("meta_tokens", 0)),
                   int(d.get("max_operators", MAX_OPERATORS)), d.get("window"))


@dataclass(frozen=True)
class ModelSpec:
    """Executable description: flat operator list plus sizes."""

    ops: tuple[OperatorKind, ...]
    hidden: int
    ffn_dim: int
    attn: AttentionConfig
    meta_tokens: int = 0
    vocab: int = BYTE_VOCAB
    name: str = ""
    genome: ArchitectureGenome | None = field(default=None, compare=False)

    @property
    def depth(self) -> int:
        """D: number of (mixer, FFN) block pairs, i.e. half the operator count rounded up."""
        return -(-len(self.ops) // 2)

    @property
    def width(self) -> int:
        return self.hidden

    @property
    def ffn_mult(self) -> int:
        return self.ffn_dim // self.hidden

    def codes(self) -> list[str]:
        return [k.code for k in self.ops]

    def count(self, name: str) -> int:
        return sum(1 for k in self.ops if k.name == name)

    def to_dict(self) -> dict:
        return {
            "name": self.name, "ops": self.codes(), "hidden": self.hidden, "ffn_dim": self.ffn_dim,
            "n_heads": self.attn.n_heads, "n_kv_heads": self.attn.n_kv_heads, "head_dim": self.attn.head_dim,
            "meta_tokens": self.meta_tokens, "vocab": self.vocab, "depth": self.depth,
            "genome": self.genome.to_dict() if self.genome else None,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        attn = AttentionConfig(d["n_heads"], d["n_kv_heads"], d["head_dim"])
        genome = ArchitectureGenome.from_dict(d["genome"]) if d.get("genome") else None
        return cls(tuple(OperatorKind.from_code(c) for c in d["ops"]), d["hidden"], d["ffn_dim"], attn,
                   d.get("meta_tokens", 0), d.get("vocab", BYTE_VOCAB), d.get("name", ""), genome)


def attention_config_for(hidden: int) -> AttentionConfig:
    """Heads for a hidden size: head_dim 16 on the desk ladder, 128 at full scale."""
    return AttentionConfig.for_width(hidden, head_dim=128 if hidden >= 1024 else 16)


def spec_from_codes(codes, hidden: int, meta_tokens: int = 0, vocab: int = BYTE_VOCAB,
                    attn: AttentionConfig | None = None, ffn_mult: int = 3, name: str = "",
                    window: int | None = None, genome: ArchitectureGenome | None = None) -> ModelSpec:
    ops = []
    for c in codes:
        k = OperatorKind.from_code(c)
        if k.is_attention and window is not None and k.window is None:
            k = OperatorKind("attention", window)
        ops.append(k)
    return ModelSpec(tuple(ops), hidden, ffn_mult * hidden, attn or attention_config_for(hidden),
                     meta_tokens, vocab, name, genome)


def decode(g: ArchitectureGenome, vocab: int = BYTE_VOCAB) -> ModelSpec:
    g.validate()
    return spec_from_codes(g.codes(), g.hidden, g.meta_tokens, vocab, window=g.window, genome=g)


def repair(g: ArchitectureGenome) -> ArchitectureGenome:
    """Drop last-stage blocks until the operator cap holds; identity on valid genomes."""
    n = g.n_operators()
    if n <= g.max_operators:
        return g
    last = g.stages[2]
    per_block = len(last.block_codes())
    need = -(-(n - g.max_operators) // per_block)
    if need > last.blocks:
        raise GenomeError(f"cap {g.max_operators} unreachable: {n - last.n_operators()} operators remain "
                          f"with the last stage emptied")
    stages = (g.stages[0], g.stages[1], replace(last, blocks=last.blocks - need))
    return replace(g, stages=stages)


def uniform_spec(mixer: str, depth: int, width: int, **kw) -> ModelSpec:
    """``depth`` blocks of (mixer, FFN); the Llama-style family used for depth/width sweeps."""
    return spec_from_codes([mixer, "f"] * depth, width, name=f"{mixer}-D{depth}-W{width}", **kw)


# ---------------------------------------------------------------- presets

NF_1B_OPS = "d f m2 f a f m2 f d f m2 f a f m2 f d f m2 f d f m2 f".split()
NF_3B_OPS = ("d f m2 f a f m2 f d f m2 f a f m2 f d f m2 f a f m2 f "
             "d f m2 f d f m2 f d f m2 f").split()
NF_VOCAB = 131072
LLAMA2_VOCAB = 32000
LATENCY_SEARCHED_OPS = NF_1B_OPS
PARAMS_SEARCHED_OPS = "m2 f a f a f d m2 f a f a f d m2 f a f a f d m2 f a f d f f".split()

# Closest three-stage genome to the latency-searched architecture: same block
# types and operator multiset (4 d, 6 m2, 2 a, 12 f), three contiguous stages.
LATENCY_SEARCHED_GENOME = ArchitectureGenome(
    (StageSpec("d", "m2", "1:1", 1, 1), StageSpec("a", "m2", "1:1", 1, 2), StageSpec("d", "m2", "1:1", 1, 3)),
    hidden=2048, meta_tokens=0)


def preset(name: str) -> ModelSpec:
    """Named model configurations: ``nf-1b``, ``nf-3b`` and their ``toy-`` scale-downs."""
    if name == "nf-1b":
        return spec_from_codes(NF_1B_OPS, 2048, DEFAULT_META_TOKENS, NF_VOCAB, AttentionConfig(16, 4, 128),
                               name=name)
    if name == "nf-3b":
        return spec_from_codes(NF_3B_OPS, 3072, DEFAULT_META_TOKENS, NF_VOCAB, AttentionConfig(24, 6, 128),
                               name=name)
    if name == "toy-1b":
        return spec_from_codes(NF_1B_OPS, 64, 4, BYTE_VOCAB, AttentionConfig(4, 1, 16), name=name)
    if name == "toy-3b":
        return spec_from_codes(NF_3B_OPS, 96, 4, BYTE_VOCAB, AttentionConfig(6, 3, 16), name=name)
    if name == "toy-hybrid":
        return spec_from_codes("d f m2 f a f m2 f".split(), 32, 4, BYTE_VOCAB, name=name)
    raise GenomeError(f"unknown preset {name!r}; known: nf-1b, nf-3b, toy-1b, toy-3b, toy-hybrid")


PRESETS = ("nf-1b", "nf-3b", "toy-1b", "toy-3b", "toy-hybrid")


def with_attention_layout(spec: ModelSpec, n_full: int, window: int) -> ModelSpec:
    """Keep the first ``n_full`` attention layers full and turn the rest into SWA."""
    ops, seen = [], 0
    for k in spec.ops:
        if k.is_attention:
            ops.append(OperatorKind("attention") if seen < n_full else OperatorKind("attention", window))
            seen += 1
        else:
            ops.append(k)
    return replace(spec, ops=tuple(ops), name=f"{spec.name}-{n_full}FA+{seen - n_full}SWA")


def load_genome(path: str | Path) -> ArchitectureGenome:
    return ArchitectureGenome.from_dict(json.loads(Path(path).read_text()))


def save_genome(g: ArchitectureGenome, path: str | Path) -> None:
    Path(path).write_text(json.dumps(g.to_dict(), indent=2, sort_keys=True))
