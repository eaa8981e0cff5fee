"""Region masks on a tiny text-to-image sequence, then the infill shift."""
import numpy as np

from hiergen.coglm import (ALL_AT_ONCE, REGION_BY_REGION, TEXT_TO_IMAGE, MaskRegionSet, build_attention_mask,
                           layout_sequence, prepare_infill)
from hiergen.tokenizer import TextVocab

vocab = TextVocab(["red", "circle"], offset=16)
seq = layout_sequence(vocab.encode("red circle"), np.arange(9).reshape(3, 3), TEXT_TO_IMAGE, "en", vocab)
# image ids sit below the vocabulary offset, words and specials above it
print("tokens:", " ".join(str(t) if t < vocab.offset else vocab.decode([t]) for t in seq.tokens.tolist()))


def show(mask):
    for row in mask:
        print("  " + "".join("#" if x else "." for x in row))


# one region over [BOI] and the image: plain left-to-right generation of the picture
img = seq.image_slice
regions = MaskRegionSet(((img.start, img.stop),))
print("\nwhole-image region", regions.regions)
show(build_attention_mask(len(seq), regions))

# two interior regions: everything outside them is visible to every query
regions = MaskRegionSet(((6, 7), (10, 12)))
print("\ntwo regions", regions.regions)
show(build_attention_mask(len(seq), regions))

# infilling moves the token before each region inside it (a blind spot)
for mode in (ALL_AT_ONCE, REGION_BY_REGION):
    print(f"\n{mode}:")
    for p in prepare_infill(seq, regions, mode):
        print("  regions", p.regions.regions, "fill slots", p.fill)
