"""Diverse text prompt synthesis, parsing, scoring, and parse-then-detect.

Diverse prompts are free-form questions naming one or more keypoints and
optionally an object.  They are parsed back into canonical keypoint
queries either through the LLM gateway or through a deterministic
rule-based fallback parser built from the shipped template bank.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass
from importlib import resources

from .corpus import DEFAULT_TEXT_TEMPLATE
from .errors import ParseError
from .gateway import ChatRequest

log = logging.getLogger(__name__)

KEYPOINT_SLOT = "<keypoint>"
OBJECT_SLOT = "<obj>"

PARSE_PROMPT = (
    'Please extract the animal and keypoint keywords from the below text: '
    '"{text}". Give the answer in simple words, like "Animal type:, Keypoint '
    'part:". If no animal is mentioned, set animal type to N/A.')


@dataclass(frozen=True)
class Template:
    text: str
    verbatim: bool = False

    def __post_init__(self):
        if self.text.count(KEYPOINT_SLOT) != 1:
            raise ParseError(
                f"template must contain {KEYPOINT_SLOT} exactly once: {self.text!r}")

    @property
    def has_object(self):
        return OBJECT_SLOT in self.text

    @property
    def literal_length(self):
        return len(self.text.replace(KEYPOINT_SLOT, "").replace(OBJECT_SLOT, ""))


@dataclass(frozen=True)
class TemplateBank:
    templates: tuple

    def __len__(self):
        return len(self.templates)

    def __iter__(self):
        return iter(self.templates)


def load_template_bank(path=None):
    """Load the shipped 100-template bank, or a custom JSON file."""
    if path is None:
        raw = resources.files("promptpose.data").joinpath("templates.json").read_text()
        data = json.loads(raw)
    else:
        with open(path) as f:
            data = json.load(f)
    return TemplateBank(templates=tuple(
        Template(text=t["text"], verbatim=t.get("verbatim", False))
        for t in data["templates"]))


@dataclass(frozen=True)
class ParsedPrompt:
    object: str | None
    keypoints: tuple
    failed: bool = False

    @classmethod
    def failure(cls):
        return cls(object=None, keypoints=(), failed=True)


def synthesize(template, keypoints, object_name=None):
    """Substitute keypoints (comma-joined) and object into a template."""
    if isinstance(template, Template):
        template = template.text
    keypoints = list(keypoints)
    if not keypoints:
        raise ValueError("need at least one keypoint")
    joined = ", ".join(keypoints)
    out = template.replace(KEYPOINT_SLOT, joined)
    if OBJECT_SLOT in template:
        if object_name is None:
            raise ValueError("template names an object but none was supplied")
        out = out.replace(OBJECT_SLOT, object_name)
    elif object_name is not None:
        log.warning("object %r ignored: template has no object slot", object_name)
    return out


def prompt_space_size(num_templates, n_keypoints):
    """Number of distinct prompts: templates times non-empty keypoint subsets."""
    if n_keypoints < 1:
        raise ValueError("need at least one keypoint")
    return num_templates * (2 ** n_keypoints - 1)


def build_parse_prompt(text):
    """Chat messages asking the LLM to extract object and keypoint keywords."""
    if not text:
        raise ValueError("cannot parse empty text")
    return [("user", PARSE_PROMPT.format(text=text))]


def normalize_name(name, synonyms=None, schema=None):
    """Fold case and whitespace; map to a canonical schema name when one matches.

    Hyphen/underscore folding is used only for matching, so names without a
    canonical spelling keep their punctuation (e.g. "left-back leg").
    """
    raw = re.sub(r"\s+", " ", name.strip().lower())
    folded = re.sub(r"[\s_-]+", " ", raw)
    if synonyms and folded in synonyms:
        raw = synonyms[folded]
        folded = re.sub(r"[\s_-]+", " ", raw)
    if schema is not None:
        for canonical in schema.names:
            if re.sub(r"[\s_-]+", " ", canonical.lower()) == folded:
                return canonical
    return raw


_ANIMAL_LABEL = re.compile(r"animal\s*type\s*:", re.IGNORECASE)
_KEYPOINT_LABEL = re.compile(r"keypoint\s*part\s*:", re.IGNORECASE)


def parse_reply(reply, schema=None, synonyms=None):
    """Parse an LLM extraction reply of the 'Animal type:, Keypoint part:' form.

    Tolerates ';' or newline separators between the two fields.  'N/A'
    yields an absent object.  Returns a failed ParsedPrompt when neither
    label is found or no keypoints survive normalization.
    """
    a = _ANIMAL_LABEL.search(reply)
    k = _KEYPOINT_LABEL.search(reply)
    if a is None and k is None:
        return ParsedPrompt.failure()
    obj = None
    if a is not None:
        end = k.start() if (k is not None and k.start() > a.end()) else len(reply)
        raw_obj = reply[a.end():end].strip().strip(";").strip()
        raw_obj = raw_obj.splitlines()[0].strip() if raw_obj else ""
        if raw_obj and raw_obj.lower() not in ("n/a", "na", "none"):
            obj = raw_obj.lower()
    keypoints = ()
    if k is not None:
        raw_kp = reply[k.end():].strip()
        raw_kp = raw_kp.splitlines()[0] if raw_kp else ""
        parts = [p.strip().strip(".;") for p in raw_kp.split(",")]
        keypoints = tuple(normalize_name(p, synonyms, schema) for p in parts if p)
    if not keypoints:
        return ParsedPrompt.failure()
    return ParsedPrompt(object=obj, keypoints=keypoints)


def _template_regex(template):
    pattern = re.escape(template.text.lower())
    pattern = pattern.replace(re.escape(KEYPOINT_SLOT), r"(?P<kp>.+?)")
    pattern = pattern.replace(re.escape(OBJECT_SLOT), r"(?P<obj>.+?)")
    return re.compile(rf"^{pattern}$")


def fallback_parse(text, bank, schema=None, species=None, synonyms=None):
    """Deterministic parser: longest-literal template match, then name scan.

    Template matching recovers exactly the inputs of any prompt synthesized
    from the bank; free-form text falls back to a dictionary scan over
    schema keypoint names and known species names.
    """
    lowered = text.strip().lower()
    best = None
    for template in sorted(bank, key=lambda t: -t.literal_length):
        m = _template_regex(template).match(lowered)
        if m is None:
            continue
        kps = tuple(normalize_name(p, synonyms, schema)
                    for p in m.group("kp").split(",") if p.strip())
        obj = m.groupdict().get("obj")
        best = ParsedPrompt(object=obj.strip() if obj else None, keypoints=kps)
        break
    if best is not None and best.keypoints:
        return best

    # Dictionary scan, longest names first so compound names win.
    found = []
    if schema is not None:
        folded_text = re.sub(r"[\s_-]+", " ", lowered)
        for name in sorted(schema.names, key=len, reverse=True):
            folded = re.sub(r"[\s_-]+", " ", name.lower())
            if folded in folded_text and name not in found:
                found.append(name)
    obj = None
    for sp in sorted(species or (), key=len, reverse=True):
        if sp.lower() in lowered:
            obj = sp.lower()
            break
    if not found:
        return ParsedPrompt.failure()
    return ParsedPrompt(object=obj, keypoints=tuple(found))


def parsing_accuracy(preds, gts, iou_threshold=0.9):
    """Score parses: keypoint sets by IoU, objects by exact normalized match.

    Failed parses count as incorrect.  Returns (acc_kp, acc_obj).
    """
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth lists differ in length")
    if not preds:
        raise ValueError("nothing to score")
    kp_hits = obj_hits = 0
    for pred, gt in zip(preds, gts):
        if not pred.failed:
            ps, gs = set(pred.keypoints), set(gt.keypoints)
            union = ps | gs
            iou = len(ps & gs) / len(union) if union else 1.0
            if iou >= iou_threshold:
                kp_hits += 1
            if pred.object == gt.object:
                obj_hits += 1
    return kp_hits / len(preds), obj_hits / len(preds)


def parse_then_detect(text, schema, detect_fn, mode="fallback", gateway=None,
                      bank=None, species=None, synonyms=None,
                      simple_template=DEFAULT_TEXT_TEMPLATE,
                      provider="openai", model="gpt-3.5-turbo"):
    """Parse a diverse prompt and run zero-shot detection per parsed keypoint.

    ``detect_fn`` maps a list of simple text prompts to one prediction per
    prompt.  mode 'none' feeds the raw diverse text as a single prompt;
    'llm' parses through the gateway; 'fallback' uses the rule-based parser.
    Returns (parsed, predictions).
    """
    if mode == "none":
        return None, detect_fn([text])
    if mode == "llm":
        if gateway is None:
            raise ValueError("llm mode requires a gateway")
        req = ChatRequest(provider=provider, model=model,
                          messages=tuple(build_parse_prompt(text)),
                          temperature=0.0)
        parsed = parse_reply(gateway.chat(req), schema=schema, synonyms=synonyms)
    elif mode == "fallback":
        if bank is None:
            raise ValueError("fallback mode requires a template bank")
        parsed = fallback_parse(text, bank, schema=schema, species=species,
                                synonyms=synonyms)
    else:
        raise ValueError(f"unknown parse mode: {mode!r}")
    if parsed.failed:
        raise ParseError(f"could not parse diverse prompt: {text!r}")
    category = parsed.object or "animal"
    prompts = [simple_template.format(keypoint=kp, category=category)
               for kp in parsed.keypoints]
    return parsed, detect_fn(prompts)
