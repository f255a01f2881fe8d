"""
Byte-level vocabulary and structured prompts

Base tokens are the 256 byte values (ids 0-255). Special tokens follow with fixed ids:
    256 <BOS>  257 <EOS>  258 <PAD>  259 <USER_EMBED>  260 <ITEM_EMBED>  261 <EXPLAIN_POS>
"""
import logging
import re
from dataclasses import dataclass, field
from importlib import resources
from typing import Any, Dict, List, Optional, Tuple

from app.utils.errors import PromptError

logger = logging.getLogger(__name__)

BOS, EOS, PAD = "<BOS>", "<EOS>", "<PAD>"
USER_EMBED, ITEM_EMBED, EXPLAIN_POS = "<USER_EMBED>", "<ITEM_EMBED>", "<EXPLAIN_POS>"
SPECIAL_TOKENS = (BOS, EOS, PAD, USER_EMBED, ITEM_EMBED, EXPLAIN_POS)
PROMPT_PLACEHOLDERS = (USER_EMBED, ITEM_EMBED, EXPLAIN_POS)
NUM_BYTES = 256

_SPECIAL_RE = re.compile("(" + "|".join(re.escape(t) for t in SPECIAL_TOKENS) + ")")


class Vocabulary:
    """Byte vocabulary extended with reserved special tokens"""

    def __init__(self, special_tokens: Tuple[str, ...] = SPECIAL_TOKENS):
        self.special_tokens = tuple(special_tokens)
        self.special_ids = {tok: NUM_BYTES + k for k, tok in enumerate(self.special_tokens)}
        self._by_id = {v: k for k, v in self.special_ids.items()}

    def __len__(self) -> int:
        return NUM_BYTES + len(self.special_tokens)

    @property
    def bos_id(self) -> int:
        return self.special_ids[BOS]

    @property
    def eos_id(self) -> int:
        return self.special_ids[EOS]

    @property
    def pad_id(self) -> int:
        return self.special_ids[PAD]

    def id_of(self, token: str) -> int:
        return self.special_ids[token]

    def encode(self, text: str, specials: bool = True) -> List[int]:
        """UTF-8 bytes; special-token strings map to their reserved ids when `specials`"""
        if not specials:
            return list(text.encode("utf-8"))
        ids: List[int] = []
        for piece in _SPECIAL_RE.split(text):
            if piece in self.special_ids:
                ids.append(self.special_ids[piece])
            elif piece:
                ids.extend(piece.encode("utf-8"))
        return ids

    def decode(self, ids: List[int], skip_special: bool = True) -> str:
        out, buf = [], bytearray()
        for t in ids:
            if t < NUM_BYTES:
                buf.append(t)
                continue
            out.append(buf.decode("utf-8", errors="replace"))
            buf = bytearray()
            if not skip_special:
                out.append(self._by_id[t])
        out.append(buf.decode("utf-8", errors="replace"))
        return "".join(out)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": "bytes", "num_bytes": NUM_BYTES, "special_tokens": list(self.special_tokens)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "Vocabulary":
        if data.get("kind") != "bytes" or data.get("num_bytes") != NUM_BYTES:
            raise PromptError(f"unsupported vocabulary: {data}")
        return cls(tuple(data["special_tokens"]))


def load_template(name: str = "explain_prompt.txt") -> str:
    """Read a prompt text asset shipped in app/templates"""
    return resources.files("app.templates").joinpath(name).read_text(encoding="utf-8")


@dataclass
class PromptInstance:
    token_ids: List[int]
    user_pos: int
    item_pos: int
    explain_pos: int
    user_id: Any = None
    item_id: Any = None
    target_ids: List[int] = field(default_factory=list)
    include_profiles: bool = True

    @property
    def length(self) -> int:
        return len(self.token_ids)

    def sequence(self) -> List[int]:
        """Prompt followed by the target tokens (training input)"""
        return self.token_ids + self.target_ids


def validate_template(template: str) -> None:
    positions = []
    for placeholder in PROMPT_PLACEHOLDERS:
        count = template.count(placeholder)
        if count != 1:
            raise PromptError(f"template must contain {placeholder} exactly once (found {count})")
        positions.append(template.index(placeholder))
    if positions != sorted(positions):
        raise PromptError("template placeholders must appear in order USER_EMBED, ITEM_EMBED, EXPLAIN_POS")
    # targets are appended right after the prompt, so nothing may follow EXPLAIN_POS
    if not template.endswith(EXPLAIN_POS):
        raise PromptError("template must end with EXPLAIN_POS")


def build_prompt(vocab: Vocabulary, user_id: Any, item_id: Any, profiles: Optional[Tuple[str, str]] = None,
                 template: Optional[str] = None, include_profiles: bool = True,
                 explanation: Optional[str] = None) -> PromptInstance:
    """
    Fill the structured prompt and record the reserved positions

    `{user_profile}` / `{item_profile}` slots are filled with the profile texts, or removed
    entirely when profiles are excluded. A given explanation becomes the target (plus EOS).
    """
    template = load_template() if template is None else template
    validate_template(template)
    use_profiles = include_profiles and profiles is not None
    user_text, item_text = profiles if use_profiles else ("", "")
    for text in (user_text, item_text):
        if any(tok in text for tok in SPECIAL_TOKENS):
            raise PromptError("profile text must not contain special tokens")
    filled = template.replace("{user_profile}", user_text).replace("{item_profile}", item_text)

    ids = [vocab.bos_id] + vocab.encode(filled)
    prompt = PromptInstance(
        token_ids=ids,
        user_pos=ids.index(vocab.id_of(USER_EMBED)),
        item_pos=ids.index(vocab.id_of(ITEM_EMBED)),
        explain_pos=ids.index(vocab.id_of(EXPLAIN_POS)),
        user_id=user_id,
        item_id=item_id,
        include_profiles=use_profiles,
    )
    if explanation is not None:
        prompt.target_ids = vocab.encode(explanation, specials=False) + [vocab.eos_id]
    return prompt
