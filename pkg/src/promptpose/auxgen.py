"""Auxiliary keypoint-text pair generation.

Auxiliary keypoints are interpolated along predefined paths between
annotated keypoints; their names are reasoned by an LLM (vanilla or
chain-of-thought prompt), pooled over R repetitions, and one text is
selected either by visual-text correlation or by windowed sampling with
false-text control (FTC).
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from fractions import Fraction

import torch

from .errors import SelectionError
from .gateway import ChatRequest
from .prototype import extract_vkr

SYSTEM_INSTRUCTION = "You are a helpful assistant that produces keypoints of an animal."

_QUESTION = (
    'Please give me three most common body parts/keypoints at {z} between '
    '{p1} and {p2} of {c}. Pay attention to the left and right. Please answer '
    'in concise words like "1. 2. 3.". Please do not include {p1} and {p2} in '
    'answers. Provide no excessive explanations.')

_WORKED_EXAMPLE_Q = (
    "Q: Please give me one most common body part/keypoint at 1/2 between "
    "left-front knee and left-front paw of an animal. Please answer in "
    "concise words. Provide no excessive explanations.")

_WORKED_EXAMPLE_A = (
    "A: The starting point is left-front knee. The end point is left-front "
    "paw. The answer should be between the starting point and end point. "
    "Left-front ankle is between the starting point and end point. The "
    "answer is left-front ankle.")


@dataclass(frozen=True)
class InterpolationPath:
    endpoint_ids: tuple  # (n1, n2) schema indices
    z: float
    names: tuple  # printable names of the two endpoints
    category: str

    def __post_init__(self):
        if not 0.0 < self.z < 1.0:
            raise ValueError("interpolation node must lie strictly inside (0, 1)")
        if self.endpoint_ids[0] == self.endpoint_ids[1]:
            raise ValueError("interpolation endpoints must be distinct")


@dataclass
class TextPool:
    candidates: list = field(default_factory=list)  # (text, repetition, rank)
    failures: list = field(default_factory=list)  # repetition indices

    def __len__(self):
        return len(self.candidates)

    def texts(self):
        return [c[0] for c in self.candidates]


@dataclass(frozen=True)
class FTCConfig:
    repetitions: int = 3
    eta: int = 1
    alpha: float = 0.01

    def __post_init__(self):
        if self.repetitions < 1:
            raise ValueError("repetitions must be >= 1")
        if self.eta < 1:
            raise ValueError("rank window must be >= 1")
        if not -1.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be a cosine value in [-1, 1]")


@dataclass
class AuxiliaryPair:
    support_point: tuple
    query_point: tuple
    text: str | None
    provenance: dict


def interpolate_visual(p1, p2, z):
    """Linear interpolation between two pixel keypoints."""
    if not 0.0 <= z <= 1.0:
        raise ValueError("z must lie in [0, 1]")
    return ((1.0 - z) * p1[0] + z * p2[0], (1.0 - z) * p1[1] + z * p2[1])


def foreground_gate(p, mask):
    """True iff the mask is absent (permissive) or marks p as foreground."""
    if mask is None:
        return True
    row, col = int(p[1]), int(p[0])
    if not (0 <= row < mask.shape[0] and 0 <= col < mask.shape[1]):
        return False
    return bool(mask[row, col])


def _format_node(z):
    frac = Fraction(z).limit_denominator(100)
    return f"{frac.numerator}/{frac.denominator}"


def build_itpl_prompt(path, cot=True):
    """Build the chat messages asking for interpolated keypoint names."""
    question = _QUESTION.format(z=_format_node(path.z), p1=path.names[0],
                                p2=path.names[1], c=path.category)
    if cot:
        user = f"{_WORKED_EXAMPLE_Q}\n{_WORKED_EXAMPLE_A}\nQ: {question}"
    else:
        user = question
    return [("system", SYSTEM_INSTRUCTION), ("user", user)]


_NUMBERED = re.compile(r"^\s*\d+\.\s*(.+?)\s*$")


def parse_numbered_answers(reply):
    """Extract up to three 'k. text' lines; lowercased, punctuation stripped."""
    answers = []
    for line in reply.splitlines():
        m = _NUMBERED.match(line)
        if m:
            answers.append(m.group(1).rstrip(" .,;:!?").lower())
    return answers[:3]


def collect_pool(path, repetitions, gateway, cot=True, provider="openai",
                 model="gpt-3.5-turbo", temperature=1.0):
    """Query the gateway R times and pool the parsed candidates with ranks."""
    req = ChatRequest(provider=provider, model=model,
                      messages=tuple(build_itpl_prompt(path, cot)),
                      temperature=temperature)
    pool = TextPool()
    for i in range(repetitions):
        reply = gateway.chat(req, repetition=i)
        answers = parse_numbered_answers(reply)
        if not answers:
            pool.failures.append(i)
            continue
        for rank, text in enumerate(answers, start=1):
            pool.candidates.append((text, i, rank))
    return pool


def _cosine(a, b):
    return float(torch.dot(a, b) / (a.norm() * b.norm()))


def select_text_corr(pool, phi, text_feature_fn):
    """Pick the pool text most correlated with the auxiliary visual feature."""
    if len(pool) == 0:
        raise SelectionError("cannot select from an empty text pool")
    sims = [_cosine(phi, text_feature_fn(t)) for t in pool.texts()]
    best = max(range(len(sims)), key=lambda i: (sims[i], -i))
    return pool.candidates[best][0]


def ftc_sample(pool, phi, cfg, rng, text_feature_fn):
    """Sample a text within the rank window, rejecting low-similarity ones.

    Returns (text | None, provenance).  An empty remainder is a valid
    outcome: the pair then degrades to visual-only supervision.
    """
    windowed = [(i, c) for i, c in enumerate(pool.candidates) if c[2] <= cfg.eta]
    sims = {i: _cosine(phi, text_feature_fn(c[0])) for i, c in windowed}
    kept = [i for i, _ in windowed if sims[i] >= cfg.alpha]
    provenance = {
        "pool": list(pool.candidates),
        "similarities": sims,
        "rejected": [i for i, _ in windowed if sims[i] < cfg.alpha],
    }
    if not kept:
        provenance["decision"] = None
        return None, provenance
    choice = kept[int(rng.integers(len(kept)))]
    provenance["decision"] = choice
    return pool.candidates[choice][0], provenance


@dataclass
class FeatureContext:
    """Everything auxiliary-pair construction needs from the model side."""

    support_feature_map: object  # FeatureMap of the support image
    text_feature_fn: object  # str -> d-vector, same reduction as TKPs
    feature_source: str  # "original" before bootstrap, "adapted" after
    sigma: float = 1.0
    support_mask: object = None
    query_mask: object = None


def make_auxiliary_pair(episode, path, cfg, gateway, ctx, rng, cot=True,
                        selection="ftc"):
    """Build one auxiliary keypoint-text pair for an episode, or None.

    Interpolates the path in both the support and the query, gates both
    points on the foreground mask, pools interpolated texts from the
    gateway, and selects one text (FTC by default, correlation otherwise).
    """
    n1, n2 = path.endpoint_ids
    support = episode.supports[0]
    for inst in (support, episode.query):
        for nid in (n1, n2):
            if not inst.keypoints[nid][2]:
                return None
    p_s = interpolate_visual(support.keypoints[n1][:2], support.keypoints[n2][:2],
                             path.z)
    p_q = interpolate_visual(episode.query.keypoints[n1][:2],
                             episode.query.keypoints[n2][:2], path.z)
    if not (foreground_gate(p_s, ctx.support_mask)
            and foreground_gate(p_q, ctx.query_mask)):
        return None

    phi = extract_vkr(ctx.support_feature_map, p_s, ctx.sigma).vector.detach()
    pool = collect_pool(path, cfg.repetitions, gateway, cot=cot)
    provenance = {"path": {"endpoints": path.endpoint_ids, "names": path.names,
                           "z": path.z},
                  "feature_source": ctx.feature_source,
                  "parse_failures": list(pool.failures)}
    if len(pool) == 0:
        provenance["pool"] = []
        provenance["decision"] = None
        text = None
    elif selection == "corr":
        text = select_text_corr(pool, phi, ctx.text_feature_fn)
        provenance["pool"] = list(pool.candidates)
        provenance["decision"] = text
    else:
        text, ftc_prov = ftc_sample(pool, phi, cfg, rng, ctx.text_feature_fn)
        provenance.update(ftc_prov)
    return AuxiliaryPair(support_point=p_s, query_point=p_q, text=text,
                         provenance=provenance)
