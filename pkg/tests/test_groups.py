import numpy as np
import pytest
import scipy.linalg
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from liestats.errors import DescriptorMismatch, EmptyProduct, InvalidElement, OutsideLogDomain
from liestats.groups import (
    SE3,
    SO3,
    GLPlus,
    Product,
    Translation,
    hat3,
    parse_group,
    power,
    product_group,
    vee3,
)

from conftest import ALL_GROUPS, MATRIX_GROUPS, random_elements, rot_z

seeds = st.integers(0, 2**32 - 1)


def se3_generator(v):
    """4x4 matrix of the se(3) element with coordinates (omega, u)."""
    X = np.zeros((4, 4))
    X[:3, :3] = hat3(v[:3])
    X[:3, 3] = v[3:]
    return X


def conjugation_adjoint(group, g, eps=1e-6):
    """Central differences of v -> log(g exp(v) g^-1), an oracle for Ad(g)."""
    ginv = group.inverse(g)
    cols = []
    for e in np.eye(group.dim):
        plus = group.log(group.compose(group.compose(g, group.exp(eps * e)), ginv))
        minus = group.log(group.compose(group.compose(g, group.exp(-eps * e)), ginv))
        cols.append((plus - minus) / (2 * eps))
    return np.stack(cols, axis=1)


class TestHatVee:
    def test_round_trip(self, rng):
        w = rng.normal(size=(5, 3))
        np.testing.assert_array_equal(vee3(hat3(w)), w)

    def test_cross_product(self, rng):
        w, x = rng.normal(size=(2, 3))
        np.testing.assert_allclose(hat3(w) @ x, np.cross(w, x), rtol=1e-15)


class TestCompose:
    def test_se3_translations_add(self):
        g = SE3.from_rt(np.eye(3), [1, 0, 0])
        h = SE3.from_rt(np.eye(3), [0, 2, 0])
        np.testing.assert_array_equal(SE3().compose(g, h), SE3.from_rt(np.eye(3), [1, 2, 0]))

    def test_glplus_diagonal(self):
        G = GLPlus(2)
        np.testing.assert_array_equal(G.compose(np.diag([2.0, 1]), np.diag([3.0, 1])), np.diag([6.0, 1]))

    def test_se3_semidirect_rule(self):
        g = SE3.from_rt(rot_z(np.pi / 2), [0, 0, 0])
        h = SE3.from_rt(np.eye(3), [1, 0, 0])
        R, t = SE3.split(SE3().compose(g, h))
        np.testing.assert_allclose(R, rot_z(np.pi / 2), atol=1e-16)
        np.testing.assert_allclose(t, [0, 1, 0], atol=1e-15)

    def test_mismatched_shapes(self):
        with pytest.raises(DescriptorMismatch):
            SE3().compose(np.eye(4), np.eye(3))

    def test_batched_broadcasts(self, rng):
        G = GLPlus(3)
        g = random_elements(G, 4, rng)
        h = random_elements(G, 1, rng)[0]
        np.testing.assert_allclose(G.compose(g, h), g @ h, rtol=1e-15)


class TestInverse:
    @pytest.mark.parametrize("group", ALL_GROUPS, ids=lambda g: g.tag)
    def test_identity(self, group):
        np.testing.assert_array_equal(group.inverse(group.identity()), group.identity())

    @pytest.mark.parametrize("group", ALL_GROUPS, ids=lambda g: g.tag)
    def test_compose_gives_identity(self, group, rng):
        g = random_elements(group, 20, rng, scale=1.0)
        e = np.broadcast_to(group.identity(), g.shape)
        np.testing.assert_allclose(group.compose(g, group.inverse(g)), e, atol=1e-10)

    def test_translation(self):
        np.testing.assert_array_equal(Translation(2).inverse(np.array([3.0, -1.0])), [-3.0, 1.0])

    def test_se3(self):
        R, t = SE3.split(SE3().inverse(SE3.from_rt(rot_z(np.pi / 2), [1, 0, 0])))
        np.testing.assert_allclose(R, rot_z(-np.pi / 2), atol=1e-16)
        np.testing.assert_allclose(t, [0, 1, 0], atol=1e-16)


class TestLog:
    @pytest.mark.parametrize("group", ALL_GROUPS, ids=lambda g: g.tag)
    def test_identity(self, group):
        np.testing.assert_array_equal(group.log(group.identity()), np.zeros(group.dim))

    def test_translation(self):
        np.testing.assert_array_equal(Translation(3).log(np.array([1.0, 2.0, 3.0])), [1, 2, 3])

    def test_so3_axis_angle(self):
        np.testing.assert_allclose(SO3().log(rot_z(0.5)), [0, 0, 0.5], atol=1e-16)

    def test_so3_against_scipy_rotvec(self, rng):
        R = Rotation.random(200, random_state=7)
        rotvec = R.as_rotvec()
        inside = np.linalg.norm(rotvec, axis=1) < np.pi - 1e-6
        np.testing.assert_allclose(SO3().log(R.as_matrix()[inside]), rotvec[inside], atol=1e-9)

    @pytest.mark.parametrize("angle", [1e-12, 1e-6, 1e-4, 0.3, 2.0, np.pi - 1e-3, np.pi - 1e-7])
    def test_so3_round_trip_over_angles(self, angle, rng):
        axis = rng.normal(size=3)
        w = angle * axis / np.linalg.norm(axis)
        np.testing.assert_allclose(SO3().log(SO3().exp(w)), w, atol=1e-9)

    def test_so3_half_turn_outside_domain(self):
        with pytest.raises(OutsideLogDomain):
            SO3().log(rot_z(np.pi))

    def test_se3_half_turn_outside_domain(self):
        with pytest.raises(OutsideLogDomain):
            SE3().log(SE3.from_rt(rot_z(np.pi), [1, 2, 3]))

    def test_glplus_spectrum_on_cut(self):
        with pytest.raises(OutsideLogDomain):
            GLPlus(3).log(np.diag([-1.0, -1.0, 1.0]))

    def test_se3_against_matrix_log(self, rng):
        G = SE3()
        v = rng.normal(scale=0.8, size=(50, 6))
        v = v[G.in_log_domain(v)]
        g = G.exp(v)
        for gi, vi in zip(g, G.log(g)):
            np.testing.assert_allclose(se3_generator(vi), np.real(scipy.linalg.logm(gi)), atol=1e-9)

    def test_power_factorwise(self):
        P = power(GLPlus(3), 2)
        g = P.join([np.diag([2.0, 1, 1]), np.eye(3)])
        expected = np.zeros(18)
        expected[0] = np.log(2)
        np.testing.assert_allclose(P.log(g), expected, atol=1e-14)


class TestExp:
    @pytest.mark.parametrize("group", ALL_GROUPS, ids=lambda g: g.tag)
    def test_zero(self, group):
        np.testing.assert_allclose(group.exp(np.zeros(group.dim)), group.identity(), atol=0)

    def test_se3_pure_translation(self):
        np.testing.assert_array_equal(SE3().exp(np.array([0, 0, 0, 1.0, 2, 3])),
                                      SE3.from_rt(np.eye(3), [1, 2, 3]))

    def test_glplus_diagonal(self):
        np.testing.assert_allclose(GLPlus(2).exp(np.array([np.log(3), 0, 0, 0])), np.diag([3.0, 1]),
                                   rtol=1e-15)

    @pytest.mark.parametrize("scale", [1e-6, 1e-3, 0.5, 2.0])
    def test_closed_forms_match_matrix_exp(self, rng, scale):
        v = rng.normal(scale=scale, size=(100, 6))
        got = SE3().exp(v)
        expected = np.stack([scipy.linalg.expm(se3_generator(x)) for x in v])
        np.testing.assert_allclose(got, expected, atol=1e-9 * max(1, scale))
        got = SO3().exp(v[:, :3])
        expected = np.stack([scipy.linalg.expm(hat3(w)) for w in v[:, :3]])
        np.testing.assert_allclose(got, expected, atol=1e-12 * max(1, scale))

    @pytest.mark.parametrize("group", ALL_GROUPS, ids=lambda g: g.tag)
    def test_one_parameter_subgroup(self, group, rng):
        v = rng.normal(scale=0.4, size=group.dim)
        s, t = 0.3, 0.9
        np.testing.assert_allclose(group.exp((s + t) * v),
                                   group.compose(group.exp(s * v), group.exp(t * v)), atol=1e-9)

    @pytest.mark.parametrize("group", ALL_GROUPS, ids=lambda g: g.tag)
    def test_log_exp_round_trip(self, group, rng):
        g = random_elements(group, 50, rng, scale=0.7)
        np.testing.assert_allclose(group.exp(group.log(g)), g, atol=1e-9)


class TestAdjoint:
    @pytest.mark.parametrize("group", ALL_GROUPS, ids=lambda g: g.tag)
    def test_identity(self, group):
        np.testing.assert_allclose(group.adjoint(group.identity()), np.eye(group.dim), atol=0)

    def test_translation_trivial(self, rng):
        np.testing.assert_array_equal(Translation(4).adjoint(rng.normal(size=4)), np.eye(4))

    def test_se3_pure_translation(self):
        t = np.array([1.0, -2.0, 0.5])
        expected = np.block([[np.eye(3), np.zeros((3, 3))], [hat3(t), np.eye(3)]])
        np.testing.assert_array_equal(SE3().adjoint(SE3.from_rt(np.eye(3), t)), expected)

    @pytest.mark.parametrize("group", ALL_GROUPS, ids=lambda g: g.tag)
    def test_matches_finite_differences(self, group, rng):
        g = random_elements(group, 1, rng, scale=0.6)[0]
        np.testing.assert_allclose(group.adjoint(g), conjugation_adjoint(group, g), atol=1e-7)

    def test_glplus_conjugation_on_row_major_vectors(self, rng):
        G = GLPlus(3)
        A = random_elements(G, 1, rng, scale=0.8)[0]
        M = rng.normal(size=(3, 3))
        np.testing.assert_allclose(G.adjoint(A) @ M.reshape(-1),
                                   (A @ M @ np.linalg.inv(A)).reshape(-1), atol=1e-13)

    @pytest.mark.parametrize("group", ALL_GROUPS, ids=lambda g: g.tag)
    def test_homomorphism(self, group, rng):
        g, h = random_elements(group, 2, rng, scale=0.8)
        lhs = group.adjoint(group.compose(g, h))
        assert np.linalg.norm(lhs - group.adjoint(g) @ group.adjoint(h)) <= 1e-8 * max(1, np.linalg.norm(lhs))
        np.testing.assert_allclose(group.adjoint(group.inverse(g)), np.linalg.inv(group.adjoint(g)),
                                   atol=1e-9)

    def test_product_block_diagonal(self, rng):
        P = product_group([SE3(), GLPlus(2)])
        g1 = random_elements(SE3(), 1, rng)[0]
        g2 = random_elements(GLPlus(2), 1, rng)[0]
        expected = scipy.linalg.block_diag(SE3().adjoint(g1), GLPlus(2).adjoint(g2))
        np.testing.assert_allclose(P.adjoint(P.join([g1, g2])), expected, rtol=1e-15)


class TestConnection:
    def test_log_of_self_is_zero(self, rng):
        G = SE3()
        g = random_elements(G, 1, rng)[0]
        np.testing.assert_allclose(G.connection_log(g, g), np.zeros(6), atol=1e-15)

    def test_translation(self):
        T = Translation(2)
        p, q = np.array([1.0, 2.0]), np.array([4.0, -1.0])
        np.testing.assert_array_equal(T.connection_log(p, q), q - p)
        np.testing.assert_array_equal(T.connection_exp(p, np.array([1.0, 1.0])), [2.0, 3.0])

    def test_se3_translation_subgroup(self):
        G = SE3()
        g = SE3.from_rt(np.eye(3), [1, 0, 0])
        h = SE3.from_rt(np.eye(3), [3, 0, 0])
        np.testing.assert_allclose(G.connection_log(g, h), [0, 0, 0, 2, 0, 0], atol=1e-15)

    def test_exp_at_zero(self, rng):
        G = GLPlus(3)
        g = random_elements(G, 1, rng)[0]
        np.testing.assert_array_equal(G.connection_exp(g, np.zeros(9)), g)

    def test_so3_commuting(self):
        np.testing.assert_allclose(SO3().connection_exp(rot_z(0.3), np.array([0, 0, 0.2])), rot_z(0.5),
                                   atol=1e-15)

    @pytest.mark.parametrize("group", MATRIX_GROUPS, ids=lambda g: g.tag)
    def test_exp_inverts_log(self, group, rng):
        g, h = random_elements(group, 2, rng, scale=0.5)
        np.testing.assert_allclose(group.connection_exp(g, group.connection_log(g, h)), h, atol=1e-9)

    @pytest.mark.parametrize("group", MATRIX_GROUPS, ids=lambda g: g.tag)
    def test_left_right_trivialization(self, group, rng):
        g, h = random_elements(group, 2, rng, scale=0.5)
        left = group.adjoint(g) @ group.log(group.compose(group.inverse(g), h))
        right = group.log(group.compose(h, group.inverse(g)))
        np.testing.assert_allclose(left, right, atol=1e-8)


@pytest.mark.parametrize("group", MATRIX_GROUPS + [power(GLPlus(3), 3)], ids=lambda g: g.tag)
class TestKernelProperties:
    @settings(max_examples=25, deadline=None)
    @given(seed=seeds)
    def test_inverse_consistency(self, group, seed):
        g = random_elements(group, 20, np.random.default_rng(seed), scale=0.8)
        np.testing.assert_allclose(group.log(group.inverse(g)), -group.log(g), atol=1e-9)

    @settings(max_examples=25, deadline=None)
    @given(seed=seeds)
    def test_adjoint_relation(self, group, seed):
        rng = np.random.default_rng(seed)
        f, g = random_elements(group, 2, rng, scale=0.4)
        lhs = group.log(group.compose(g, group.inverse(f)))
        rhs = group.adjoint(f) @ group.log(group.compose(group.inverse(f), g))
        np.testing.assert_allclose(lhs, rhs, atol=1e-8)


class TestValidation:
    def test_so3_rejects_reflection(self):
        with pytest.raises(InvalidElement):
            SO3().validate(np.diag([1.0, 1.0, -1.0]))

    def test_so3_rejects_non_orthogonal(self):
        with pytest.raises(InvalidElement):
            SO3().validate(np.eye(3) + 1e-6)

    def test_se3_bottom_row(self):
        g = np.eye(4)
        g[3, 0] = 0.1
        with pytest.raises(InvalidElement):
            SE3().validate(g)

    def test_glplus_negative_det(self):
        with pytest.raises(InvalidElement):
            GLPlus(2).validate(np.diag([1.0, -1.0]))

    def test_from_payload_checks_shape(self):
        with pytest.raises(InvalidElement):
            GLPlus(3).from_payload([[1, 0], [0, 1]])


class TestDescriptors:
    @pytest.mark.parametrize("tag, dim", [
        ("translation:4", 4), ("so3", 3), ("se3", 6), ("glplus:3", 9),
        ("power:glplus:3:5", 45), ("product[se3;translation:2]", 8),
    ])
    def test_parse_round_trip(self, tag, dim):
        G = parse_group(tag)
        assert G.dim == dim
        assert G.tag == tag
        assert parse_group(G.tag) == G

    @pytest.mark.parametrize("tag", ["", "so4", "glplus:0", "power:se3:0", "translation:-1", "product[]"])
    def test_bad_tags(self, tag):
        with pytest.raises((ValueError, EmptyProduct)):
            parse_group(tag)

    def test_empty_product(self):
        with pytest.raises(EmptyProduct):
            Product([])

    def test_two_lines_are_a_plane(self, rng):
        P = power(Translation(1), 2)
        T = Translation(2)
        p, q = rng.normal(size=(2, 2))
        np.testing.assert_array_equal(P.compose(p, q), T.compose(p, q))
        np.testing.assert_array_equal(P.inverse(p), T.inverse(p))
        np.testing.assert_array_equal(P.log(p), T.log(p))
        np.testing.assert_array_equal(P.exp(p), T.exp(p))
        np.testing.assert_array_equal(P.adjoint(p), T.adjoint(p))

    def test_se3_payload_round_trip(self, rng):
        g = random_elements(SE3(), 1, rng)[0]
        payload = SE3().to_payload(g)
        assert set(payload) == {"R", "t"}
        np.testing.assert_array_equal(SE3().from_payload(payload), g)

    def test_product_payload_is_list_of_factors(self, rng):
        P = product_group([SO3(), Translation(2)])
        g = P.join([rot_z(0.2), np.array([1.0, 2.0])])
        payload = P.to_payload(g)
        assert len(payload) == 2 and payload[1] == [1.0, 2.0]
        np.testing.assert_array_equal(P.from_payload(payload), g)
