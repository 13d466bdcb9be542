"""Engine implementations behind the wire protocol, one per model role.

Two families ship here:

- ``stub``: deterministic, dependency-free engines for desk-scale runs and
  protocol conformance testing. They derive everything from digests of the
  request, so identical requests always produce identical responses and no
  two distinct subjects ever collide into the same identity.
- ``transformers``: wrappers around locally available model artifacts
  (causal LM for keyword extraction, vision-language models for grounding,
  recheck, and pair verification, image encoders for embeddings). They load
  lazily with greedy decoding pinned so responses are deterministic; a
  missing artifact raises EngineLoadError and the service refuses to bind.
"""

from __future__ import annotations

import hashlib
import json
import re
import struct
from pathlib import Path
from typing import Optional, Protocol

import numpy as np

PROMPTS_DIR = Path(__file__).parent / "prompts"


class EngineLoadError(Exception):
    """A model artifact could not be loaded; the service must not bind."""


class NoFace(Exception):
    """Raised by face embed engines when the crop contains no usable face."""


def load_prompt(name: str) -> str:
    return (PROMPTS_DIR / f"{name}.txt").read_text(encoding="utf-8")


# -- engine protocols ---------------------------------------------------------


class KeywordEngine(Protocol):
    def extract(self, caption: str) -> list[dict]: ...


class GroundEngine(Protocol):
    def ground(self, phrase: str, clip_id: str, frame_index: int) -> list[list[int]]: ...


class RecheckEngine(Protocol):
    def recheck(self, phrase: str, clip_id: str, frame_index: int,
                bbox: list[int]) -> dict: ...


class EmbedEngine(Protocol):
    dim: int

    def embed(self, crop_ref: dict) -> list[float]: ...


class VerifyEngine(Protocol):
    def verify(self, a_ref: dict, b_ref: dict, category: str) -> dict: ...


# -- shared helpers -----------------------------------------------------------

_FRAME_HEADER = struct.Struct("<II")


def read_frame_dims(frames_dir: Optional[Path], clip_id: str,
                    frame_index: int) -> Optional[tuple[int, int]]:
    """Width/height from the shared frame store header; falls back to frame 0
    of the clip when the exact frame file is absent."""
    if frames_dir is None:
        return None
    for index in (frame_index, 0):
        path = Path(frames_dir) / clip_id / f"{index}.y"
        if path.is_file():
            with open(path, "rb") as fh:
                header = fh.read(_FRAME_HEADER.size)
            if len(header) == _FRAME_HEADER.size:
                return _FRAME_HEADER.unpack(header)
    return None


def _digest(*parts: str) -> bytes:
    h = hashlib.sha256()
    for part in parts:
        h.update(part.encode("utf-8"))
        h.update(b"\x00")
    return h.digest()


def crop_key(crop_ref: dict) -> str:
    """Stable per-subject key: external image id, or (clip, phrase) for video
    crops (falling back to the exact box when no phrase is given)."""
    if "image_id" in crop_ref:
        return f"ext::{crop_ref['image_id']}"
    phrase = crop_ref.get("phrase")
    if phrase is not None:
        return f"vid::{crop_ref['clip_id']}::{phrase}"
    return "vid::{}::{}::{}".format(
        crop_ref["clip_id"], crop_ref["frame_index"], crop_ref.get("bbox")
    )


# -- stub engines -------------------------------------------------------------

# Minimal open-vocabulary lexicon for caption scanning; enough for smoke
# fixtures and protocol tests without any model weights.
STUB_LEXICON: dict[str, str] = {
    "woman": "human", "man": "human", "girl": "human", "boy": "human",
    "person": "human", "chef": "human", "skier": "human",
    "dog": "animal", "cat": "animal", "bird": "animal", "horse": "animal",
    "parrot": "animal",
    "sneaker": "product", "bottle": "product", "smartphone": "product",
    "handbag": "product", "laptop": "product", "car": "product",
    "soda": "product", "drone": "product",
    "tree": "other", "rock": "other",
}

FACE_MIN_SIDE_PX = 64


class StubKeywordEngine:
    """Lexicon scan in caption order with word boundaries."""

    def __init__(self, lexicon: Optional[dict[str, str]] = None) -> None:
        self.lexicon = dict(lexicon or STUB_LEXICON)

    def extract(self, caption: str) -> list[dict]:
        text = caption.lower()
        found = []
        for phrase, category in self.lexicon.items():
            match = re.search(rf"\b{re.escape(phrase)}\b", text)
            if match:
                found.append((match.start(), phrase, category))
        found.sort()
        return [{"text": p, "category": c} for _, p, c in found]


class StubGroundEngine:
    """One digest-placed box per (phrase, frame), sized off the frame header.

    Returns no boxes when the frame store has no file for the clip, which
    keeps runs without pixel data valid (they detect nothing).
    """

    def __init__(self, frames_dir: Optional[Path]) -> None:
        self.frames_dir = Path(frames_dir) if frames_dir else None

    def ground(self, phrase: str, clip_id: str, frame_index: int) -> list[list[int]]:
        dims = read_frame_dims(self.frames_dir, clip_id, frame_index)
        if dims is None:
            return []
        width, height = dims
        side = max(128, int(0.35 * min(width, height)))
        side = min(side, width, height)
        seed = _digest("ground", clip_id, phrase)
        x_room = width - side
        y_room = height - side
        x0 = int.from_bytes(seed[0:4], "little") % (x_room + 1) if x_room else 0
        y0 = int.from_bytes(seed[4:8], "little") % (y_room + 1) if y_room else 0
        return [[x0, y0, x0 + side, y0 + side]]


class StubRecheckEngine:
    """Accept-everything recheck; products always show their logo."""

    def __init__(self, lexicon: Optional[dict[str, str]] = None) -> None:
        self.lexicon = dict(lexicon or STUB_LEXICON)

    def recheck(self, phrase: str, clip_id: str, frame_index: int,
                bbox: list[int]) -> dict:
        out = {"completeness": True, "specificity": True, "matching": True}
        if self.lexicon.get(phrase) == "product":
            out["logo_visible"] = True
        return out


class StubEmbedEngine:
    """Digest-seeded unit vectors keyed per subject (no cross-clip identity,
    so a stub-backed run never fabricates cross-context pairs)."""

    def __init__(self, kind: str, dim: int) -> None:
        self.kind = kind
        self.dim = dim

    def embed(self, crop_ref: dict) -> list[float]:
        if self.kind == "face":
            bbox = crop_ref.get("bbox")
            if bbox is not None:
                w = int(bbox[2]) - int(bbox[0])
                h = int(bbox[3]) - int(bbox[1])
                if min(w, h) < FACE_MIN_SIDE_PX:
                    raise NoFace(f"crop {w}x{h} below {FACE_MIN_SIDE_PX}px")
        seed = _digest("embed", self.kind, crop_key(crop_ref))
        rng = np.random.default_rng(int.from_bytes(seed[:8], "little"))
        vec = rng.standard_normal(self.dim)
        vec /= np.linalg.norm(vec)
        return [float(x) for x in vec]


class StubVerifyEngine:
    """Conservative pairwise check: never asserts identity for distinct
    subjects, reports diversity for distinct clips/images."""

    def verify(self, a_ref: dict, b_ref: dict, category: str) -> dict:
        same_subject = crop_key(a_ref) == crop_key(b_ref)
        a_site = a_ref.get("clip_id") or a_ref.get("image_id")
        b_site = b_ref.get("clip_id") or b_ref.get("image_id")
        return {
            "identity_consistent": same_subject,
            "context_diverse": a_site != b_site,
        }


# -- transformers-backed engines ----------------------------------------------


def _greedy_kwargs() -> dict:
    return {"do_sample": False, "num_beams": 1, "temperature": None, "top_p": None}


class TransformersKeywordEngine:
    """Causal-LM keyword extraction with a versioned prompt template."""

    def __init__(self, model_path: str, device: str = "cpu") -> None:
        self.model_path = model_path
        self.device = device
        self.prompt = load_prompt("keywords")
        try:
            from transformers import AutoModelForCausalLM, AutoTokenizer

            self.tokenizer = AutoTokenizer.from_pretrained(model_path)
            self.model = AutoModelForCausalLM.from_pretrained(model_path).to(device)
            self.model.eval()
        except Exception as exc:  # noqa: BLE001 - any load failure refuses to bind
            raise EngineLoadError(f"keyword model {model_path}: {exc}") from exc

    def extract(self, caption: str) -> list[dict]:
        import torch

        prompt = self.prompt.format(caption=caption)
        inputs = self.tokenizer(prompt, return_tensors="pt").to(self.device)
        with torch.no_grad():
            output = self.model.generate(
                **inputs, max_new_tokens=256, **_greedy_kwargs()
            )
        text = self.tokenizer.decode(
            output[0][inputs["input_ids"].shape[1]:], skip_special_tokens=True
        )
        return _parse_phrase_json(text)


class TransformersVlmEngine:
    """Shared vision-language wrapper for grounding, recheck, and pair
    verification: render the prompt, greedy-generate, parse the JSON answer
    the prompt requests."""

    def __init__(self, model_path: str, frames_dir: Optional[Path],
                 device: str = "cpu") -> None:
        self.frames_dir = Path(frames_dir) if frames_dir else None
        self.device = device
        try:
            from transformers import AutoModelForVision2Seq, AutoProcessor

            self.processor = AutoProcessor.from_pretrained(model_path)
            self.model = AutoModelForVision2Seq.from_pretrained(model_path).to(device)
            self.model.eval()
        except Exception as exc:  # noqa: BLE001
            raise EngineLoadError(f"vision-language model {model_path}: {exc}") from exc

    def _generate(self, images, prompt: str, max_new_tokens: int = 256) -> str:
        import torch

        inputs = self.processor(images=images, text=prompt,
                                return_tensors="pt").to(self.device)
        with torch.no_grad():
            output = self.model.generate(
                **inputs, max_new_tokens=max_new_tokens, **_greedy_kwargs()
            )
        return self.processor.batch_decode(output, skip_special_tokens=True)[0]

    def ground(self, phrase: str, clip_id: str, frame_index: int) -> list[list[int]]:
        frame = _load_crop(self.frames_dir, {
            "clip_id": clip_id, "frame_index": frame_index,
            "bbox": [0, 0, *_require_dims(self.frames_dir, clip_id, frame_index)],
        })
        text = self._generate([frame], load_prompt("ground").format(phrase=phrase))
        return _parse_box_json(text)

    def recheck(self, phrase: str, clip_id: str, frame_index: int,
                bbox: list[int]) -> dict:
        crop = _load_crop(self.frames_dir, {
            "clip_id": clip_id, "frame_index": frame_index, "bbox": bbox,
        })
        text = self._generate([crop], load_prompt("recheck").format(phrase=phrase))
        answer = _parse_object_json(text)
        return {
            "completeness": bool(answer.get("completeness", False)),
            "specificity": bool(answer.get("specificity", False)),
            "matching": bool(answer.get("matching", False)),
            **({"logo_visible": bool(answer["logo_visible"])}
               if "logo_visible" in answer else {}),
        }

    def verify(self, a_ref: dict, b_ref: dict, category: str) -> dict:
        images = [_load_crop(self.frames_dir, a_ref), _load_crop(self.frames_dir, b_ref)]
        text = self._generate(
            images, load_prompt("verify_pair").format(category=category)
        )
        answer = _parse_object_json(text)
        return {
            "identity_consistent": bool(answer.get("identity_consistent", False)),
            "context_diverse": bool(answer.get("context_diverse", False)),
        }


class TorchScriptFaceEngine:
    """Face encoder exported as TorchScript: 112x112 RGB in, embedding out,
    L2-normalized here."""

    INPUT_SIZE = 112

    def __init__(self, model_path: str, frames_dir: Optional[Path],
                 device: str = "cpu") -> None:
        self.frames_dir = Path(frames_dir) if frames_dir else None
        self.device = device
        try:
            import torch

            self.model = torch.jit.load(model_path, map_location=device)
            self.model.eval()
            probe = torch.zeros(1, 3, self.INPUT_SIZE, self.INPUT_SIZE)
            with torch.no_grad():
                self.dim = int(self.model(probe.to(device)).shape[-1])
        except Exception as exc:  # noqa: BLE001
            raise EngineLoadError(f"face encoder {model_path}: {exc}") from exc

    def embed(self, crop_ref: dict) -> list[float]:
        import torch

        bbox = crop_ref.get("bbox")
        if bbox is not None:
            w = int(bbox[2]) - int(bbox[0])
            h = int(bbox[3]) - int(bbox[1])
            if min(w, h) < FACE_MIN_SIDE_PX:
                raise NoFace(f"crop {w}x{h} below {FACE_MIN_SIDE_PX}px")
        image = _load_crop(self.frames_dir, crop_ref).resize(
            (self.INPUT_SIZE, self.INPUT_SIZE)
        )
        array = np.asarray(image, dtype=np.float32).transpose(2, 0, 1)
        array = (array / 127.5) - 1.0
        tensor = torch.from_numpy(array).unsqueeze(0).to(self.device)
        with torch.no_grad():
            features = self.model(tensor)[0]
        features = features / features.norm()
        return [float(x) for x in features.cpu().numpy()]


def _parse_phrase_json(text: str) -> list[dict]:
    """Extract the first JSON array of {text, category} objects from text."""
    match = re.search(r"\[.*\]", text, flags=re.DOTALL)
    if not match:
        return []
    try:
        items = json.loads(match.group(0))
    except json.JSONDecodeError:
        return []
    out = []
    for item in items:
        if not isinstance(item, dict) or "text" not in item:
            continue
        category = item.get("category", "other")
        if category not in ("human", "animal", "product", "other"):
            category = "other"
        if item["text"]:
            out.append({"text": str(item["text"]), "category": category})
    return out


def _parse_box_json(text: str) -> list[list[int]]:
    """Extract a JSON array of 4-number boxes from generated text."""
    match = re.search(r"\[.*\]", text, flags=re.DOTALL)
    if not match:
        return []
    try:
        items = json.loads(match.group(0))
    except json.JSONDecodeError:
        return []
    boxes = []
    for item in items:
        if isinstance(item, (list, tuple)) and len(item) == 4:
            boxes.append([int(v) for v in item])
    return boxes


def _parse_object_json(text: str) -> dict:
    match = re.search(r"\{.*\}", text, flags=re.DOTALL)
    if not match:
        return {}
    try:
        obj = json.loads(match.group(0))
    except json.JSONDecodeError:
        return {}
    return obj if isinstance(obj, dict) else {}


def _require_dims(frames_dir: Optional[Path], clip_id: str,
                  frame_index: int) -> tuple[int, int]:
    dims = read_frame_dims(frames_dir, clip_id, frame_index)
    if dims is None:
        raise EngineLoadError(f"no frame data for {clip_id}/{frame_index}")
    return dims


class ClipEmbedEngine:
    """CLIP-style image encoder for the general identity representation."""

    def __init__(self, model_path: str, frames_dir: Optional[Path],
                 device: str = "cpu") -> None:
        self.frames_dir = Path(frames_dir) if frames_dir else None
        self.device = device
        try:
            from transformers import CLIPModel, CLIPProcessor

            self.model = CLIPModel.from_pretrained(model_path).to(device)
            self.model.eval()
            self.processor = CLIPProcessor.from_pretrained(model_path)
            self.dim = int(self.model.config.projection_dim)
        except Exception as exc:  # noqa: BLE001
            raise EngineLoadError(f"general encoder {model_path}: {exc}") from exc

    def embed(self, crop_ref: dict) -> list[float]:
        import torch

        image = _load_crop(self.frames_dir, crop_ref)
        inputs = self.processor(images=image, return_tensors="pt").to(self.device)
        with torch.no_grad():
            features = self.model.get_image_features(**inputs)[0]
        features = features / features.norm()
        return [float(x) for x in features.cpu().numpy()]


def _load_crop(frames_dir: Optional[Path], crop_ref: dict):
    """Crop pixels for a reference: grayscale frame-store reads for video
    crops, image files for the external corpus."""
    from PIL import Image

    if "image_id" in crop_ref:
        if frames_dir is None:
            raise EngineLoadError("external image store not configured")
        path = Path(frames_dir) / "external" / f"{crop_ref['image_id']}.png"
        return Image.open(path).convert("RGB")
    if frames_dir is None:
        raise EngineLoadError("frames_dir not configured")
    path = Path(frames_dir) / crop_ref["clip_id"] / f"{crop_ref['frame_index']}.y"
    with open(path, "rb") as fh:
        width, height = _FRAME_HEADER.unpack(fh.read(_FRAME_HEADER.size))
        luma = np.frombuffer(fh.read(width * height), dtype=np.uint8)
    image = Image.fromarray(luma.reshape(height, width), mode="L").convert("RGB")
    x0, y0, x1, y1 = (int(v) for v in crop_ref["bbox"])
    return image.crop((x0, y0, x1, y1))


ROLES = ("keywords", "ground", "recheck", "embed_face", "embed_general", "verify_pair")


def build_engines(config) -> dict:
    """Instantiate one engine per role from an AdapterConfig."""
    engines: dict = {}
    for role in ROLES:
        name = config.engines.get(role, "stub")
        if name == "stub":
            engines[role] = _build_stub(role, config)
        elif name == "transformers":
            engines[role] = _build_transformers(role, config)
        else:
            raise EngineLoadError(f"unknown engine {name!r} for role {role}")
    return engines


def _build_stub(role: str, config):
    if role == "keywords":
        return StubKeywordEngine()
    if role == "ground":
        return StubGroundEngine(config.frames_dir)
    if role == "recheck":
        return StubRecheckEngine()
    if role == "embed_face":
        return StubEmbedEngine("face", config.dims["face"])
    if role == "embed_general":
        return StubEmbedEngine("general", config.dims["general"])
    return StubVerifyEngine()


def _build_transformers(role: str, config):
    model_path = config.models.get(role)
    if not model_path:
        raise EngineLoadError(f"role {role}: engine 'transformers' needs [models].{role}")
    if role == "keywords":
        return TransformersKeywordEngine(model_path, config.device)
    if role == "embed_general":
        return ClipEmbedEngine(model_path, config.frames_dir, config.device)
    if role == "embed_face":
        return TorchScriptFaceEngine(model_path, config.frames_dir, config.device)
    # ground / recheck / verify_pair share the VLM wrapper
    return TransformersVlmEngine(model_path, config.frames_dir, config.device)
