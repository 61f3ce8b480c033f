import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from llfmc.analysis import (GroupMembership, SubgroupSpec, even_groups,
                            generate_subgroup_instance, identify_subgroups,
                            pairwise_agreement, relative_error, rmse, similarity_matrix)
from llfmc.core import DataError, FactorPair

from oracles import rand_index

labels = st.lists(st.integers(0, 5), min_size=1, max_size=25)


def test_even_groups_remainder_to_leading():
    assert even_groups(7, 3).tolist() == [0, 0, 0, 1, 1, 2, 2]
    assert even_groups(4, 4).tolist() == [0, 1, 2, 3]


def test_generator_counts_and_norm():
    inst = generate_subgroup_instance(SubgroupSpec(n=200, d=5, k_x=20, sigma=100, rho=0.3))
    assert inst.M_obs.nnz == 12000
    assert np.linalg.norm(inst.M_star) == pytest.approx(1e6, rel=1e-9)
    assert inst.truth_x.n_groups == 20 and inst.has_subgroups


def test_generator_groups_are_exactly_equal_rows():
    inst = generate_subgroup_instance(SubgroupSpec(n=30, m=20, d=3, k_x=4, k_y=5, seed=3))
    for grp in inst.truth_x.groups():
        assert np.all(inst.X_star[grp] == inst.X_star[grp[0]])
    for grp in inst.truth_y.groups():
        assert np.all(inst.Y_star[grp] == inst.Y_star[grp[0]])
    assert identify_subgroups(inst.X_star, 0.0).assignment.tolist() == \
        inst.truth_x.assignment.tolist()


def test_generator_noise_free_full_sampling():
    inst = generate_subgroup_instance(SubgroupSpec(n=12, d=2, k_x=3, sigma=0, rho=1.0))
    assert np.array_equal(inst.M_obs.to_dense(), inst.M_star)


def test_generator_no_subgroups():
    inst = generate_subgroup_instance(SubgroupSpec(n=10, d=2, k_x=10, rho=0.5))
    assert inst.truth_x.n_groups == 10 and not inst.has_subgroups


def test_generator_seeded_and_validated():
    a = generate_subgroup_instance(SubgroupSpec(n=20, d=2, k_x=4, seed=5))
    b = generate_subgroup_instance(SubgroupSpec(n=20, d=2, k_x=4, seed=5))
    assert a.M_obs.entries == b.M_obs.entries
    with pytest.raises(ValueError):
        generate_subgroup_instance(SubgroupSpec(n=3, d=1, k_x=1, rho=0.05))
    with pytest.raises(ValueError):
        SubgroupSpec(n=5, k_x=6)


def test_identify_examples():
    F = np.tile([1.0, 2.0], (5, 1))
    assert identify_subgroups(F).n_groups == 1
    two = np.vstack([np.tile([1.0, 0.0], (3, 1)), np.tile([0.0, 50.0], (2, 1))])
    assert identify_subgroups(two).assignment.tolist() == [0, 0, 0, 1, 1]
    close = np.array([[1.0, 0.0], [1.005, 0.0]])
    assert identify_subgroups(close).n_groups == 1


def test_similarity_matrix_raw_rule():
    F = np.array([[1.0, 0.0], [1.02, 0.0], [0.0, 1.0]])
    S = similarity_matrix(F)
    assert S.diagonal().all()
    assert not S[0, 1] and not S[0, 2]
    assert np.array_equal(S, S.T)


def test_identify_takes_transitive_closure():
    # 0~1 and 1~2 but not 0~2: one group after closure
    F = np.array([[1.0], [1.008], [1.016]])
    S = similarity_matrix(F)
    assert S[0, 1] and S[1, 2] and not S[0, 2]
    assert identify_subgroups(F).n_groups == 1


def test_agreement_examples():
    a = GroupMembership([0, 0, 1])
    assert pairwise_agreement(a, a) == 1.0
    assert pairwise_agreement(GroupMembership([0, 1, 2]), GroupMembership([0, 0, 0])) == 0.0
    with pytest.raises(ValueError):
        pairwise_agreement(a, GroupMembership([0, 1]))


@settings(max_examples=200, deadline=None)
@given(a=labels, b=labels)
def test_agreement_properties(a, b):
    n = min(len(a), len(b))
    A, B = GroupMembership(a[:n]), GroupMembership(b[:n])
    r = pairwise_agreement(A, B)
    assert r == pytest.approx(rand_index(a[:n], b[:n]))
    assert r == pairwise_agreement(B, A)
    same = np.array_equal(A.pair_matrix(), B.pair_matrix())
    assert (r == 1.0) == same


@settings(max_examples=100, deadline=None)
@given(a=labels)
def test_membership_is_equivalence_relation(a):
    S = GroupMembership(a).pair_matrix()
    assert S.diagonal().all() and np.array_equal(S, S.T)
    assert np.array_equal((S.astype(int) @ S.astype(int) > 0), S)


def test_rmse_examples():
    assert rmse([1, 2], [1, 2]) == 0.0
    assert rmse([0, 0], [3, 4]) == pytest.approx(np.sqrt(12.5))
    assert rmse([2.0], [1.0]) == 1.0
    with pytest.raises(ValueError):
        rmse([], [])
    with pytest.raises(ValueError):
        rmse([1], [1, 2])


def test_relative_error_examples():
    rng = np.random.default_rng(0)
    M = rng.normal(size=(4, 3))
    assert relative_error(M, M) == 0.0
    assert relative_error(np.zeros_like(M), M) == 1.0
    assert relative_error(2 * M, M) == pytest.approx(1.0)
    X, Y = rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    assert relative_error(FactorPair(X, Y), X @ Y.T) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(DataError):
        relative_error(M, np.zeros_like(M))
