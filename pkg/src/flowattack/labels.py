"""Semantic category table shared by scenes, masks, reports and label PNGs."""

CATEGORIES = ("construction", "flat", "human", "nature", "object", "vehicle", "sky", "void")

# Ids written into 8-bit label PNGs.  void is 255 so that zero-filled
# buffers never silently read as "unlabeled".
CATEGORY_IDS = {
    "construction": 0,
    "flat": 1,
    "human": 2,
    "nature": 3,
    "object": 4,
    "vehicle": 5,
    "sky": 6,
    "void": 255,
}
ID_TO_NAME = {v: k for k, v in CATEGORY_IDS.items()}
VOID = CATEGORY_IDS["void"]


def category_id(category) -> int:
    """Accept a category name or id and return the id."""
    if isinstance(category, str):
        try:
            return CATEGORY_IDS[category]
        except KeyError:
            raise ValueError(f"unknown category {category!r}; expected one of {CATEGORIES}") from None
    cid = int(category)
    if cid not in ID_TO_NAME:
        raise ValueError(f"unknown category id {cid}")
    return cid


def category_name(category) -> str:
    return ID_TO_NAME[category_id(category)]
