import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import base_document, fixture_path
from trial_redesign.modification import (
    ActionType,
    Augmentation,
    BannedMember,
    CandidateProtocol,
    ConflictingSlot,
    ModificationSet,
    StaleTarget,
    Validation,
    apply,
    check_conflicts,
    index_maps,
    rebase,
)
from trial_redesign.protocol import DOSAGE, EXCLUSION, INCLUSION, AspectRef, load_protocol, protocol_from_document

AC_CELLS = "Baseline anterior chamber cell grade of at least 2+ (SUN criteria)"


def enrollment():
    return load_protocol(fixture_path("enrollment", "protocol.json"))


def delete(p, aspect, i):
    return Augmentation(AspectRef(aspect, i), ActionType.DELETE, original=p.resolve(AspectRef(aspect, i)))


def modify(p, aspect, i, value):
    return Augmentation(AspectRef(aspect, i), ActionType.MODIFY, value, original=p.resolve(AspectRef(aspect, i)))


def test_delete_wait_and_add_ac_cells():
    p = enrollment()
    mods = ModificationSet.of([
        delete(p, INCLUSION, 1),
        Augmentation(AspectRef(INCLUSION), ActionType.ADD, AC_CELLS, slot_tag="ac"),
    ])
    out = apply(p, mods)
    assert not any("wait to undergo" in c for c in out.inclusion_criteria)
    assert out.inclusion_criteria[-1] == AC_CELLS
    assert len(out.inclusion_criteria) == len(p.inclusion_criteria)
    assert out.exclusion_criteria == p.exclusion_criteria


def test_empty_set_is_identity():
    p = enrollment()
    assert apply(p, ModificationSet()) == p


def test_dosage_modify_replaces_only_dosage():
    doc = base_document()
    doc["dosage"] = "100mg oral daily for 28 days"
    p = protocol_from_document(doc)
    out = apply(p, ModificationSet.of([modify(p, DOSAGE, None, "50mg oral daily for 28 days")]))
    assert out.dosage == "50mg oral daily for 28 days"
    assert out.to_document() | {"dosage": p.dosage} == p.to_document()


def test_two_modifies_on_one_slot_conflict():
    p = protocol_from_document(base_document())
    mods = ModificationSet.of([modify(p, INCLUSION, 1, "a"), modify(p, INCLUSION, 1, "b")])
    conflicts = check_conflicts(mods, p)
    assert [c.kind for c in conflicts] == ["ConflictingSlot"]
    with pytest.raises(ConflictingSlot):
        apply(p, mods)


def test_delete_out_of_range():
    p = protocol_from_document(base_document(n_inc=2))
    mods = ModificationSet.of([Augmentation(AspectRef(INCLUSION, 3), ActionType.DELETE)])
    assert [c.kind for c in check_conflicts(mods, p)] == ["IndexOutOfRange"]


def test_banned_and_stale_members():
    p = protocol_from_document(base_document())
    banned = modify(p, INCLUSION, 0, "x").with_validation(Validation.BANNED)
    with pytest.raises(BannedMember):
        apply(p, ModificationSet.of([banned]))
    stale = Augmentation(AspectRef(INCLUSION, 0), ActionType.MODIFY, "y", original="something else")
    with pytest.raises(StaleTarget):
        apply(p, ModificationSet.of([stale]))


def test_disjoint_five_mods_have_no_conflicts():
    p = protocol_from_document(base_document())
    mods = ModificationSet.of([
        delete(p, INCLUSION, 0),
        modify(p, INCLUSION, 2, "changed"),
        delete(p, EXCLUSION, 1),
        modify(p, DOSAGE, None, "5mg daily"),
        Augmentation(AspectRef(EXCLUSION), ActionType.ADD, "new exclusion", slot_tag="t"),
    ])
    assert check_conflicts(mods, p) == []
    out = apply(p, mods)
    assert out.inclusion_criteria == ("inclusion 1", "changed", "inclusion 3", "inclusion 4")
    assert out.exclusion_criteria == ("exclusion 0", "exclusion 2", "new exclusion")


def test_augmentation_invariants():
    with pytest.raises(ValueError):
        Augmentation(AspectRef(INCLUSION), ActionType.DELETE)
    with pytest.raises(ValueError):
        Augmentation(AspectRef(INCLUSION, 0), ActionType.DELETE, "v")
    with pytest.raises(ValueError):
        Augmentation(AspectRef(DOSAGE), ActionType.ADD, "v")
    with pytest.raises(ValueError):
        Augmentation(AspectRef(INCLUSION), ActionType.MODIFY, "v")
    with pytest.raises(ValueError):
        Augmentation(AspectRef(INCLUSION, 0), ActionType.MODIFY, "v", confidence=1.5)


def test_id_ignores_validation_and_roundtrips():
    a = Augmentation(AspectRef(INCLUSION, 0), ActionType.MODIFY, "v", strategy="s", original="inclusion 0")
    assert a.with_validation(Validation.GOOD).id == a.id
    assert Augmentation.from_dict(a.to_dict()) == a
    bad = a.to_dict() | {"id": "0" * 16}
    with pytest.raises(ValueError):
        Augmentation.from_dict(bad)


def test_index_maps_and_rebase():
    p = protocol_from_document(base_document(n_inc=5))
    mods = ModificationSet.of([delete(p, INCLUSION, 1), delete(p, INCLUSION, 3)])
    maps = index_maps(p, mods)
    assert maps[INCLUSION] == [0, None, 1, None, 2]
    out = apply(p, mods)
    later = modify(p, INCLUSION, 4, "changed")
    moved = rebase(later, maps)
    assert moved.target.index == 2 and out.resolve(moved.target) == later.original
    assert rebase(modify(p, INCLUSION, 1, "gone"), maps) is None
    add = Augmentation(AspectRef(INCLUSION), ActionType.ADD, "x", slot_tag="t")
    assert rebase(add, maps) is add


def test_candidate_hash_matches_derived():
    p = enrollment()
    c = CandidateProtocol.build(p, ModificationSet.of([delete(p, INCLUSION, 1)]))
    assert c.derived_hash == CandidateProtocol.build(p, ModificationSet.of([delete(p, INCLUSION, 1)])).derived_hash
    assert c.score is None and c.scored(0.4).score == 0.4


@settings(max_examples=50, deadline=None)
@given(st.integers(min_value=0, max_value=10_000))
def test_apply_is_order_independent_and_maps_agree(seed):
    rng = random.Random(seed)
    p = protocol_from_document(base_document(n_inc=rng.randint(1, 6), n_exc=rng.randint(1, 4)))
    augs = []
    for aspect in (INCLUSION, EXCLUSION):
        for i in range(len(p.aspect(aspect))):
            roll = rng.random()
            if roll < 0.3:
                augs.append(delete(p, aspect, i))
            elif roll < 0.6:
                augs.append(modify(p, aspect, i, f"{aspect[-6:]} {i} changed"))
    for j in range(rng.randint(0, 2)):
        augs.append(Augmentation(AspectRef(INCLUSION), ActionType.ADD, f"added {j}", slot_tag=str(j)))
    shuffled = list(augs)
    rng.shuffle(shuffled)
    out = apply(p, ModificationSet.of(augs))
    assert out == apply(p, ModificationSet.of(shuffled))
    maps = index_maps(p, ModificationSet.of(augs))
    for aspect in (INCLUSION, EXCLUSION):
        for old, new in enumerate(maps[aspect]):
            if new is not None:
                assert out.aspect(aspect)[new] in (p.aspect(aspect)[old], f"{aspect[-6:]} {old} changed")
