"""Fixed byte-level tokenizer: PAD=0, BOS=1, EOS=2, byte b -> b + 3."""

from __future__ import annotations

PAD = 0
BOS = 1
EOS = 2
OFFSET = 3
VOCAB_SIZE = 256 + OFFSET


class ByteTokenizer:
    pad_id = PAD
    bos_id = BOS
    eos_id = EOS
    vocab_size = VOCAB_SIZE

    def encode(self, text, bos: bool = True) -> list[int]:
        if isinstance(text, str):
            text = text.encode("utf-8")
        ids = [b + OFFSET for b in bytes(text)]
        return [BOS] + ids if bos else ids

    def decode(self, ids) -> bytes:
        """Bytes for every byte token; BOS/EOS/PAD are dropped."""
        return bytes(i - OFFSET for i in ids if i >= OFFSET)


_default = ByteTokenizer()
encode = _default.encode
decode = _default.decode
