//! Exact integer algebra for the roto-reflection groups `p4` and `p4m` on Z^3.
//!
//! Elements are 4x4 homogeneous integer matrices. An element is built from
//! mirror flags `m`, quarter-turn counts `r` and a translation `t` as the
//! product `R_x * R_y * R_z * T`. The `x` factor acts on the (x, y) plane as
//!
//! ```text
//! [ (-1)^m cos(r pi/2)   -(-1)^m sin(r pi/2)   0 ]
//! [        sin(r pi/2)           cos(r pi/2)   0 ]
//! [        0                     0             1 ]
//! ```
//!
//! and the `y` and `z` factors use the same block on the cyclically shifted
//! coordinate pairs (y, z) and (z, x).
//!
//! Integration over the group reduces to a plain sum over elements (counting
//! measure), which is what the lifting convolution uses.

use std::fmt;

use crate::error::{Error, Result};

pub type Mat4 = [[i64; 4]; 4];

#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct GroupElement {
    mat: Mat4,
}

impl fmt::Debug for GroupElement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "GroupElement{:?}", self.mat)
    }
}

/// `cos` and `sin` of `r * pi / 2`, exactly.
fn quarter_turn(r: u8) -> (i64, i64) {
    match r % 4 {
        0 => (1, 0),
        1 => (0, 1),
        2 => (-1, 0),
        _ => (0, -1),
    }
}

fn mul(a: &Mat4, b: &Mat4) -> Mat4 {
    let mut out = [[0i64; 4]; 4];
    for (i, row) in out.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate() {
            *cell = (0..4).map(|l| a[i][l] * b[l][j]).sum();
        }
    }
    out
}

/// Mirror-rotation factor acting on the coordinate pair `(p, q)`.
fn plane_factor(p: usize, q: usize, mirror: u8, r: u8) -> Mat4 {
    let (c, s) = quarter_turn(r);
    let sign = if mirror == 1 { -1 } else { 1 };
    let mut m = GroupElement::IDENTITY.mat;
    m[p][p] = sign * c;
    m[p][q] = -sign * s;
    m[q][p] = s;
    m[q][q] = c;
    m
}

impl GroupElement {
    pub const IDENTITY: GroupElement = GroupElement {
        mat: [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]],
    };

    /// Builds `R_x * R_y * R_z * T` from mirror flags in `{0, 1}`, quarter
    /// turns in `0..4` and an integer translation.
    pub fn from_params(m: [u8; 3], r: [u8; 3], t: [i64; 3]) -> Result<Self> {
        if let Some(bad) = m.iter().find(|&&v| v > 1) {
            return Err(Error::InvalidArgument(format!("mirror flag {bad} not in {{0,1}}")));
        }
        if let Some(bad) = r.iter().find(|&&v| v > 3) {
            return Err(Error::InvalidArgument(format!("rotation {bad} not in 0..4")));
        }
        let rx = plane_factor(0, 1, m[0], r[0]);
        let ry = plane_factor(1, 2, m[1], r[1]);
        let rz = plane_factor(2, 0, m[2], r[2]);
        let tr = Self::translation(t).mat;
        Ok(GroupElement {
            mat: mul(&mul(&mul(&rx, &ry), &rz), &tr),
        })
    }

    pub fn translation(t: [i64; 3]) -> Self {
        let mut mat = Self::IDENTITY.mat;
        for a in 0..3 {
            mat[a][3] = t[a];
        }
        GroupElement { mat }
    }

    /// Wraps a matrix after checking the homogeneous signed-permutation form.
    pub fn from_matrix(mat: Mat4) -> Result<Self> {
        let g = GroupElement { mat };
        if mat[3] != [0, 0, 0, 1] {
            return Err(Error::InvalidArgument("last row must be (0,0,0,1)".into()));
        }
        if !g.is_signed_permutation() {
            return Err(Error::InvalidArgument(
                "rotation block is not a signed permutation".into(),
            ));
        }
        Ok(g)
    }

    pub fn matrix(&self) -> &Mat4 {
        &self.mat
    }

    pub fn rotation(&self) -> [[i64; 3]; 3] {
        let mut r = [[0; 3]; 3];
        for (i, row) in r.iter_mut().enumerate() {
            row.copy_from_slice(&self.mat[i][..3]);
        }
        r
    }

    pub fn translation_part(&self) -> [i64; 3] {
        [self.mat[0][3], self.mat[1][3], self.mat[2][3]]
    }

    pub fn is_linear(&self) -> bool {
        self.translation_part() == [0, 0, 0]
    }

    pub fn determinant(&self) -> i64 {
        let r = self.rotation();
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1])
            - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn is_signed_permutation(&self) -> bool {
        let r = self.rotation();
        let unit = |v: i64| v == 1 || v == -1;
        (0..3).all(|i| {
            let row_nz: Vec<i64> = r[i].iter().copied().filter(|&v| v != 0).collect();
            let col_nz: Vec<i64> = (0..3).map(|j| r[j][i]).filter(|&v| v != 0).collect();
            row_nz.len() == 1 && unit(row_nz[0]) && col_nz.len() == 1 && unit(col_nz[0])
        })
    }

    /// Matrix product `self * other` (apply `other` first).
    pub fn compose(&self, other: &GroupElement) -> GroupElement {
        GroupElement {
            mat: mul(&self.mat, &other.mat),
        }
    }

    /// Exact inverse: transposed rotation block, translation `-R^T t`.
    pub fn inverse(&self) -> GroupElement {
        let r = self.rotation();
        let t = self.translation_part();
        let mut mat = Self::IDENTITY.mat;
        for i in 0..3 {
            for j in 0..3 {
                mat[i][j] = r[j][i];
            }
            mat[i][3] = -(0..3).map(|j| r[j][i] * t[j]).sum::<i64>();
        }
        GroupElement { mat }
    }

    pub fn act(&self, p: [i64; 3]) -> [i64; 3] {
        let m = &self.mat;
        let mut out = [0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * p[0] + m[i][1] * p[1] + m[i][2] * p[2] + m[i][3];
        }
        out
    }

    /// Rotation block applied to a vector, no translation.
    pub fn rotate(&self, v: [i64; 3]) -> [i64; 3] {
        let m = &self.mat;
        let mut out = [0; 3];
        for (i, o) in out.iter_mut().enumerate() {
            *o = m[i][0] * v[0] + m[i][1] * v[1] + m[i][2] * v[2];
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GroupKind {
    /// Rotations only.
    P4,
    /// Rotations and mirrors.
    P4m,
}

impl GroupKind {
    pub fn name(&self) -> &'static str {
        match self {
            GroupKind::P4 => "p4",
            GroupKind::P4m => "p4m",
        }
    }
}

impl std::str::FromStr for GroupKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "p4" => Ok(GroupKind::P4),
            "p4m" => Ok(GroupKind::P4m),
            other => Err(Error::InvalidArgument(format!("unknown group {other:?}"))),
        }
    }
}

/// Zero-translation elements of a group, in enumeration order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct StabilizerSet {
    pub kind: GroupKind,
    pub deduped: bool,
    elements: Vec<GroupElement>,
}

impl StabilizerSet {
    pub fn elements(&self) -> &[GroupElement] {
        &self.elements
    }

    /// Number of elements, `P`.
    pub fn len(&self) -> usize {
        self.elements.len()
    }

    pub fn is_empty(&self) -> bool {
        self.elements.is_empty()
    }

    /// First position holding `g`'s matrix.
    pub fn index_of(&self, g: &GroupElement) -> Option<usize> {
        self.elements.iter().position(|e| e == g)
    }

    /// Just the identity; turns the lifting convolution into a plain one.
    pub fn trivial() -> Self {
        StabilizerSet {
            kind: GroupKind::P4,
            deduped: true,
            elements: vec![GroupElement::IDENTITY],
        }
    }

    /// Arbitrary subset, in the given order. Used for tests and ablations.
    pub fn from_elements(kind: GroupKind, elements: Vec<GroupElement>) -> Result<Self> {
        if elements.is_empty() || elements.iter().any(|g| !g.is_linear()) {
            return Err(Error::InvalidArgument(
                "stabilizer elements must be non-empty and translation-free".into(),
            ));
        }
        Ok(StabilizerSet {
            kind,
            deduped: false,
            elements,
        })
    }
}

/// Every parameter combination with zero translation: 64 for `p4`, 512 for
/// `p4m`. With `dedupe`, keeps the first occurrence of each distinct matrix.
pub fn enumerate_stabilizer(kind: GroupKind, dedupe: bool) -> StabilizerSet {
    let mirrors: Vec<[u8; 3]> = match kind {
        GroupKind::P4 => vec![[0, 0, 0]],
        GroupKind::P4m => (0..8u8).map(|b| [(b >> 2) & 1, (b >> 1) & 1, b & 1]).collect(),
    };
    let mut elements = Vec::with_capacity(mirrors.len() * 64);
    for m in &mirrors {
        for rx in 0..4 {
            for ry in 0..4 {
                for rz in 0..4 {
                    let g = GroupElement::from_params(*m, [rx, ry, rz], [0; 3])
                        .expect("parameters in range");
                    if !dedupe || !elements.contains(&g) {
                        elements.push(g);
                    }
                }
            }
        }
    }
    StabilizerSet {
        kind,
        deduped: dedupe,
        elements,
    }
}

/// Outcome of exhaustively checking the group axioms on a finite set.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AxiomReport {
    pub size: usize,
    pub has_identity: bool,
    pub closed: bool,
    pub inverses: bool,
    pub associative: bool,
    pub signed_permutations: bool,
    pub distinct: bool,
}

impl AxiomReport {
    pub fn all_hold(&self) -> bool {
        self.has_identity
            && self.closed
            && self.inverses
            && self.associative
            && self.signed_permutations
            && self.distinct
    }
}

/// Checks closure, identity, inverses and associativity over all pairs and
/// triples.
pub fn check_axioms(set: &StabilizerSet) -> AxiomReport {
    let els = set.elements();
    let distinct = els
        .iter()
        .enumerate()
        .all(|(i, a)| els[..i].iter().all(|b| a != b));
    let contains = |g: &GroupElement| els.contains(g);
    let closed = els.iter().all(|a| els.iter().all(|b| contains(&a.compose(b))));
    let inverses = els.iter().all(|a| {
        let inv = a.inverse();
        contains(&inv)
            && a.compose(&inv) == GroupElement::IDENTITY
            && inv.compose(a) == GroupElement::IDENTITY
    });
    let associative = els.iter().all(|a| {
        els.iter().all(|b| {
            let ab = a.compose(b);
            els.iter()
                .all(|c| ab.compose(c) == a.compose(&b.compose(c)))
        })
    });
    AxiomReport {
        size: els.len(),
        has_identity: contains(&GroupElement::IDENTITY),
        closed,
        inverses,
        associative,
        signed_permutations: els.iter().all(|g| g.is_signed_permutation()),
        distinct,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_parameters() {
        let g = GroupElement::from_params([0; 3], [0; 3], [0; 3]).unwrap();
        assert_eq!(g, GroupElement::IDENTITY);
    }

    #[test]
    fn out_of_range_parameters() {
        assert!(GroupElement::from_params([0; 3], [4, 0, 0], [0; 3]).is_err());
        assert!(GroupElement::from_params([2, 0, 0], [0; 3], [0; 3]).is_err());
        // Period four: r = 4 would coincide with r = 0.
        assert_eq!(quarter_turn(4), quarter_turn(0));
    }

    #[test]
    fn single_mirror_is_diagonal() {
        let g = GroupElement::from_params([1, 0, 0], [0; 3], [0; 3]).unwrap();
        assert_eq!(
            *g.matrix(),
            [[-1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]]
        );
        assert_eq!(g.determinant(), -1);
        assert_eq!(g.inverse(), g);
    }

    #[test]
    fn quarter_turn_moves_x_to_y() {
        let g = GroupElement::from_params([0; 3], [1, 0, 0], [0; 3]).unwrap();
        assert_eq!(g.act([1, 0, 0]), [0, 1, 0]);
        assert_eq!(g.act([0, 1, 0]), [-1, 0, 0]);
        assert_eq!(g.act([0, 0, 1]), [0, 0, 1]);
    }

    #[test]
    fn two_quarter_turns_make_a_half_turn() {
        for axis in 0..3 {
            let mut r1 = [0; 3];
            r1[axis] = 1;
            let mut r2 = [0; 3];
            r2[axis] = 2;
            let q = GroupElement::from_params([0; 3], r1, [0; 3]).unwrap();
            let h = GroupElement::from_params([0; 3], r2, [0; 3]).unwrap();
            assert_eq!(q.compose(&q), h);
        }
    }

    #[test]
    fn translations() {
        let t = GroupElement::translation([1, 2, 3]);
        assert_eq!(t.act([0, 0, 0]), [1, 2, 3]);
        assert_eq!(t.inverse(), GroupElement::translation([-1, -2, -3]));
        assert_eq!(GroupElement::IDENTITY.act([4, -5, 6]), [4, -5, 6]);
    }

    #[test]
    fn mixed_element_inverse() {
        let g = GroupElement::from_params([1, 0, 1], [1, 3, 2], [5, -2, 7]).unwrap();
        assert_eq!(g.compose(&g.inverse()), GroupElement::IDENTITY);
        assert_eq!(g.inverse().compose(&g), GroupElement::IDENTITY);
        let p = [3, -1, 4];
        assert_eq!(g.inverse().act(g.act(p)), p);
    }

    #[test]
    fn from_matrix_validates() {
        let mut m = GroupElement::IDENTITY.mat;
        m[0][1] = 1;
        assert!(GroupElement::from_matrix(m).is_err());
        let mut m = GroupElement::IDENTITY.mat;
        m[3][0] = 1;
        assert!(GroupElement::from_matrix(m).is_err());
        assert!(GroupElement::from_matrix(GroupElement::IDENTITY.mat).is_ok());
    }

    #[test]
    fn stabilizer_sizes() {
        assert_eq!(enumerate_stabilizer(GroupKind::P4, false).len(), 64);
        assert_eq!(enumerate_stabilizer(GroupKind::P4m, false).len(), 512);
        assert_eq!(enumerate_stabilizer(GroupKind::P4, true).len(), 24);
        assert_eq!(enumerate_stabilizer(GroupKind::P4m, true).len(), 48);
        assert_eq!(
            enumerate_stabilizer(GroupKind::P4m, true).elements()[0],
            GroupElement::IDENTITY
        );
    }

    #[test]
    fn p4_is_rotation_subgroup_of_p4m() {
        let p4 = enumerate_stabilizer(GroupKind::P4, true);
        let p4m = enumerate_stabilizer(GroupKind::P4m, true);
        let rotations: Vec<_> = p4m
            .elements()
            .iter()
            .filter(|g| g.determinant() == 1)
            .collect();
        assert_eq!(rotations.len(), 24);
        assert!(p4.elements().iter().all(|g| rotations.contains(&g)));
        assert!(p4.elements().iter().all(|g| g.determinant() == 1));
    }

    #[test]
    fn axiom_report_on_trivial_and_broken_sets() {
        assert!(check_axioms(&StabilizerSet::trivial()).all_hold());
        let q = GroupElement::from_params([0; 3], [1, 0, 0], [0; 3]).unwrap();
        let broken =
            StabilizerSet::from_elements(GroupKind::P4, vec![GroupElement::IDENTITY, q]).unwrap();
        let report = check_axioms(&broken);
        assert!(!report.closed);
        assert!(!report.inverses);
        assert!(!report.all_hold());
    }
}
