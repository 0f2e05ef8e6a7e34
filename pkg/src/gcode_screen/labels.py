"""The five mutually exclusive screening classes."""

LABELS = ("ND", "UE", "OE", "WP", "ST")

LABEL_NAMES = {
    "ND": "non-defective",
    "UE": "under-extrusion",
    "OE": "over-extrusion",
    "WP": "warping",
    "ST": "stringing",
}


def check_label(label: str) -> str:
    if label not in LABELS:
        raise ValueError(f"unknown label {label!r}; expected one of {', '.join(LABELS)}")
    return label
