"""
MLaaS federation engine.

Word grouping: provider labels to shared category groups.

Created by Matua Doc.
Created on 2026-10-19.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

from main_model import (Detection, ImagePrediction, OverrideConflict,
                        RawDetection, TemplateError)
from main_utils import read_lines

logger = logging.getLogger(__name__)


def clean_label(label: str) -> str:
    """Return a label lowercased with surrounding whitespace removed."""
    return label.strip().lower()


@dataclass(frozen=True)
class LabelGroup:
    """One template category and every label that means the same thing."""

    canonical: str
    members: frozenset[str]


@dataclass(frozen=True)
class SynonymLexicon:
    """Noun synonyms for each word, as extracted from a thesaurus."""

    entries: dict[str, frozenset[str]] = field(default_factory=dict)

    def synonyms_of(self, word: str) -> frozenset[str]:
        """Return the direct synonyms of a word (no transitive closure)."""
        return self.entries.get(clean_label(word), frozenset())


@dataclass
class GroupingTable:
    """Category groups in template order, plus the label lookup."""

    _groups: list[LabelGroup]
    _warnings: list[str] = field(default_factory=list)

    def __post_init__(self) -> None:
        """Build the member to group index lookup."""
        self._index: dict[str, int] = {}
        for number, group in enumerate(self._groups):
            for member in group.members:
                self._index[member] = number

    def __len__(self) -> int:
        """Return the number of groups."""
        return len(self._groups)

    @property
    def groups(self) -> list[LabelGroup]:
        """The groups, in template order."""
        return self._groups

    @property
    def index(self) -> dict[str, int]:
        """The map from member label to group index."""
        return self._index

    @property
    def warnings(self) -> list[str]:
        """Conflicts noticed while the table was built."""
        return self._warnings

    def group_of(self, label: str) -> int | None:
        """Return the group index of a label, or None if it is unknown."""
        return self._index.get(clean_label(label))

    def category_name(self, group: int) -> str:
        """Return the template category of a group."""
        return self._groups[group].canonical


def build_grouping(template: list[str],
                   lexicon: SynonymLexicon,
                   overrides: list[tuple[str, str]]) -> GroupingTable:
    """
    Group provider labels under the categories of a template.

    Each template category claims itself first. Override labels are then
    claimed by their category, and finally each category claims its direct
    lexicon synonyms in template order. A label already claimed keeps its
    first owner and the clash is recorded as a warning.

    Raises TemplateError for an empty or duplicated template, and
    OverrideConflict if one label is overridden to two categories.
    """
    categories = [clean_label(category) for category in template]
    if not categories:
        raise TemplateError("Template has no categories")
    if len(set(categories)) != len(categories):
        raise TemplateError("Template categories repeat after lowercasing")
    position = {category: i for i, category in enumerate(categories)}

    # Resolve the overrides to a single category per label.
    override_map: dict[str, str] = {}
    for label, category in overrides:
        label = clean_label(label)
        category = clean_label(category)
        if category not in position:
            raise TemplateError(f"Override target '{category}' is not in "
                                f"the template")
        previous = override_map.get(label)
        if previous is not None and previous != category:
            raise OverrideConflict(f"Label '{label}' is overridden to both "
                                   f"'{previous}' and '{category}'")
        override_map[label] = category

    owner: dict[str, int] = {category: i for i, category in
                             enumerate(categories)}
    warnings: list[str] = []

    def claim(label: str, number: int, source: str) -> None:
        """Give a label to a group unless another group has it already."""
        current = owner.get(label)
        if current is None:
            owner[label] = number
        elif current != number:
            message = (f"'{label}' from {source} of '{categories[number]}' "
                       f"is already in group '{categories[current]}'")
            warnings.append(message)
            logger.warning(message)

    for label, category in override_map.items():
        claim(label, position[category], "an override")

    for number, category in enumerate(categories):
        for synonym in sorted(lexicon.synonyms_of(category)):
            claim(clean_label(synonym), number, "the lexicon")

    # Collect the members of each group.
    members: list[set[str]] = [set() for _ in categories]
    for label, number in owner.items():
        members[number].add(label)

    groups = [LabelGroup(category, frozenset(members[number]))
              for number, category in enumerate(categories)]
    logger.debug("Built %d groups covering %d labels",
                 len(groups), len(owner))
    return GroupingTable(groups, warnings)


def normalize(raw: RawDetection, table: GroupingTable) -> Detection | None:
    """
    Map a raw detection onto its category group.

    Returns None (the detection is dropped) when the label belongs to no
    group. The score and box are never changed.
    """
    group = table.group_of(raw.label)
    if group is None:
        return None
    return Detection(group, raw.score, raw.box)


def normalize_all(raws: list[RawDetection],
                  table: GroupingTable) -> ImagePrediction:
    """Normalize a provider's detections, dropping unknown labels."""
    detections = []
    for raw in raws:
        detection = normalize(raw, table)
        if detection is not None:
            detections.append(detection)
    return ImagePrediction(detections)


def read_template(path: Path) -> list[str]:
    """Load newline-separated template categories."""
    return [line.strip() for line in read_lines(path)]


def read_lexicon(path: Path) -> SynonymLexicon:
    """
    Load a lexicon file.

    Each line is `word<TAB>syn1,syn2,...`; lines for the same word merge.
    """
    entries: dict[str, set[str]] = {}
    for line in read_lines(path):
        word, _, synonym_text = line.partition("\t")
        synonyms = {clean_label(synonym) for synonym in synonym_text.split(",")
                    if synonym.strip()}
        entries.setdefault(clean_label(word), set()).update(synonyms)

    return SynonymLexicon({word: frozenset(synonyms)
                           for word, synonyms in entries.items()})


def read_overrides(path: Path) -> list[tuple[str, str]]:
    """Load `provider_label<TAB>template_category` pairs."""
    overrides = []
    for line in read_lines(path):
        label, _, category = line.partition("\t")
        overrides.append((label, category))
    return overrides


def load_grouping(template_path: Path,
                  lexicon_path: Path | None = None,
                  overrides_path: Path | None = None) -> GroupingTable:
    """Build a grouping table from its three input files."""
    template = read_template(template_path)
    lexicon = read_lexicon(lexicon_path) if lexicon_path else SynonymLexicon()
    overrides = read_overrides(overrides_path) if overrides_path else []
    return build_grouping(template, lexicon, overrides)


def identity_grouping(categories: list[str]) -> GroupingTable:
    """Return a table where each category is only its own name."""
    return build_grouping(categories, SynonymLexicon(), [])
