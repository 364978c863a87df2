//! The fixed 5x5 linear test matrices and the right-hand-side mean.
//!
//! Entries are transcribed verbatim (including the few that carry a seventh
//! digit); the derived family A4..A7 shifts the diagonal of A1.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{DenseMatrix, DenseVector};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct BuiltinMatrix(u8);

impl BuiltinMatrix {
    pub const ALL: [BuiltinMatrix; 19] = {
        let mut all = [BuiltinMatrix(1); 19];
        let mut i = 0;
        while i < 19 {
            all[i] = BuiltinMatrix(i as u8 + 1);
            i += 1;
        }
        all
    };

    pub fn new(index: u8) -> Result<Self> {
        if (1..=19).contains(&index) {
            Ok(Self(index))
        } else {
            Err(Error::UnknownMatrix(format!("A{index}")))
        }
    }

    pub fn index(self) -> u8 {
        self.0
    }

    pub fn matrix(self) -> DenseMatrix {
        builtin_matrix(self)
    }
}

impl fmt::Display for BuiltinMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "A{}", self.0)
    }
}

impl FromStr for BuiltinMatrix {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let digits = s
            .strip_prefix('A')
            .or_else(|| s.strip_prefix('a'))
            .ok_or_else(|| Error::UnknownMatrix(s.to_string()))?;
        let idx: u8 = digits
            .parse()
            .map_err(|_| Error::UnknownMatrix(s.to_string()))?;
        Self::new(idx).map_err(|_| Error::UnknownMatrix(s.to_string()))
    }
}

impl TryFrom<String> for BuiltinMatrix {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<BuiltinMatrix> for String {
    fn from(m: BuiltinMatrix) -> String {
        m.to_string()
    }
}

/// Diagonal shift used to build A4..A7 from A1.
pub const DELTA_LAMBDA: [f64; 5] = [0.5, 0.4, 0.3, 0.2, 0.1];

/// Spectrum overlay used for A1..A3 and A12..A19.
pub const LAMBDA: [f64; 5] = [1.0, 0.75, 0.5, 0.1, 0.1];

pub const B_TILDE: [f64; 5] = [2.483570, -0.691321, 3.238442, 7.615149, -1.170766];

pub fn builtin_b_tilde() -> DenseVector {
    B_TILDE.to_vec()
}

fn from_table(t: &[[f64; 5]; 5]) -> DenseMatrix {
    DenseMatrix::from_row_major(5, 5, t.concat()).expect("5x5 table")
}

fn shifted_a1(factor: f64) -> DenseMatrix {
    let mut a = from_table(&A1);
    for (i, d) in DELTA_LAMBDA.iter().enumerate() {
        a[(i, i)] += factor * d;
    }
    a
}

pub fn builtin_matrix(id: BuiltinMatrix) -> DenseMatrix {
    match id.0 {
        1 => from_table(&A1),
        2 => from_table(&A2),
        3 => from_table(&A3),
        4 => shifted_a1(-1.0),
        5 => shifted_a1(0.5),
        6 => shifted_a1(1.3),
        7 => shifted_a1(2.5),
        8 => from_table(&A8),
        9 => from_table(&A9),
        10 => from_table(&A10),
        11 => from_table(&A11),
        12 => from_table(&A12),
        13 => from_table(&A13),
        14 => from_table(&A14),
        15 => from_table(&A15),
        16 => from_table(&A16),
        17 => from_table(&A17),
        18 => from_table(&A18),
        19 => from_table(&A19),
        _ => unreachable!("BuiltinMatrix is range-checked"),
    }
}

/// Looks a matrix up by name (`"A1"` .. `"A19"`).
pub fn builtin_matrix_by_name(name: &str) -> Result<DenseMatrix> {
    Ok(builtin_matrix(name.parse()?))
}

#[rustfmt::skip]
const A1: [[f64; 5]; 5] = [
    [1.392232, 0.152829, 0.088680, 0.185377, 0.156244],
    [0.152829, 1.070883, 0.020994, 0.068940, 0.141251],
    [0.088680, 0.020994, 0.910692, -0.222769, 0.060267],
    [0.185377, 0.068940, -0.222769, 0.833275, 0.058072],
    [0.156244, 0.141251, 0.060267, 0.058072, 0.735495],
];

#[rustfmt::skip]
const A2: [[f64; 5]; 5] = [
    [1.122760, -0.040031, 0.113992, 0.068578, 0.089329],
    [-0.040031, 0.920757, 0.085742, 0.089300, 0.158474],
    [0.113992, 0.085742, 0.896851, 0.150485, 0.044783],
    [0.068578, 0.089300, 0.150485, 0.729516, 0.070168],
    [0.089329, 0.158474, 0.044783, 0.070168, 1.163038],
];

#[rustfmt::skip]
const A3: [[f64; 5]; 5] = [
    [1.037577, 0.120230, -0.149775, 0.099841, 0.169390],
    [0.120230, 1.095856, 0.180211, 0.120029, 0.133797],
    [-0.149775, 0.180211, 0.781548, 0.241405, 0.320369],
    [0.099841, 0.120029, 0.241405, 0.877185, 0.040910],
    [0.169390, 0.133797, 0.320369, 0.040910, 0.602205],
];

#[rustfmt::skip]
const A8: [[f64; 5]; 5] = [
    [9.801337, -4.563474, 2.196806, -5.154676, 5.063176],
    [-4.563474, 48.751049, -26.335994, -3.910831, 17.380485],
    [2.196806, -26.335994, 31.887071, 1.215492, -12.532923],
    [-5.154676, -3.910831, 1.215492, 4.0743960, -5.876128],
    [5.063176, 17.380485, -12.532923, -5.876128, 25.900849],
];

#[rustfmt::skip]
const A9: [[f64; 5]; 5] = [
    [19.582102, -1.721533, 5.067191, 20.194875, 1.561468],
    [-1.721533, 38.090555, -11.445662, -22.832142, -0.152421],
    [5.067191, -11.445662, 17.191893, 14.784228, -3.889048],
    [20.194875, -22.832142, 14.784228, 49.221081, 22.059518],
    [1.561468, -0.152421, -3.889048, 22.059518, 31.461613],
];

#[rustfmt::skip]
const A10: [[f64; 5]; 5] = [
    [1.543741, -1.708336, -0.855255, 1.180115, -0.606022],
    [-1.708336, 7.993454, 1.813288, -0.855154, -0.375811],
    [-0.855255, 1.813288, 2.131294, -2.223852, -0.808170],
    [1.180115, -0.855154, -2.223852, 3.296235, 1.148258],
    [-0.606022, -0.375811, -0.8081702, 1.148258, 2.018821],
];

#[rustfmt::skip]
const A11: [[f64; 5]; 5] = [
    [0.554750, 0.192700, -0.030087, -0.173792, 0.078237],
    [0.192700, 0.134709, 0.005420, 0.156018, -0.081507],
    [-0.030087, 0.005420, 0.491319, -0.087115, -0.068497],
    [-0.173792, 0.156018, -0.087115, 0.923782, -0.356224],
    [0.078237, -0.081507, -0.068497, -0.356224, 0.197102],
];

#[rustfmt::skip]
const A12: [[f64; 5]; 5] = [
    [1.803328, 0.200759, -0.355809, -0.098682, -0.037251],
    [0.200759, 1.243347, 0.088843, 0.263899, 0.195536],
    [-0.355809, 0.088843, 1.495596, 0.093483, 0.383077],
    [-0.098682, 0.263899, 0.093483, 1.295673, 0.091526],
    [-0.037251, 0.195536, 0.383077, 0.091526, 1.171966],
];

#[rustfmt::skip]
const A13: [[f64; 5]; 5] = [
    [1.373797, 0.029822, 0.291240, -0.06804, -0.122712],
    [0.029822, 1.352286, 0.213403, 0.259224, 0.113595],
    [0.291240, 0.213403, 1.145153, 0.260138, -0.256945],
    [-0.068040, 0.259224, 0.260138, 1.044292, 0.023357],
    [-0.122712, 0.113595, -0.256945, 0.023357, 1.493027],
];

#[rustfmt::skip]
const A14: [[f64; 5]; 5] = [
    [1.875641, 0.369074, -0.254450, 0.011282, 0.086120],
    [0.369074, 1.438546, 0.165303, 0.330450, 0.326974],
    [-0.254450, 0.165303, 1.578616, 0.135095, 0.435910],
    [0.011282, 0.330450, 0.135095, 1.407443, 0.175663],
    [0.086120, 0.326974, 0.435910, 0.175663, 1.302648],
];

#[rustfmt::skip]
const A15: [[f64; 5]; 5] = [
    [1.496302, 0.069012, 0.466847, -0.023807, -0.07450],
    [0.069012, 1.356091, 0.304412, 0.368689, 0.278316],
    [0.466847, 0.304412, 1.273936, 0.359224, -0.193665],
    [-0.023807, 0.368689, 0.359224, 1.096486, 0.099104],
    [-0.0745018, 0.278316, -0.193665, 0.099104, 1.661732],
];

#[rustfmt::skip]
const A16: [[f64; 5]; 5] = [
    [1.947954, 0.537389, -0.153091, 0.121248, 0.209492],
    [0.537389, 1.633745, 0.241763, 0.397001, 0.458412],
    [-0.153091, 0.241763, 1.661637, 0.176707, 0.488742],
    [0.121248, 0.397001, 0.176707, 1.519214, 0.259799],
    [0.209492, 0.458412, 0.488742, 0.259799, 1.433331],
];

#[rustfmt::skip]
const A17: [[f64; 5]; 5] = [
    [1.618807, 0.108202, 0.642453, 0.020426, -0.026291],
    [0.108202, 1.359896, 0.395421, 0.478153, 0.443036],
    [0.642453, 0.395421, 1.402719, 0.458310, -0.130384],
    [0.020426, 0.478153, 0.458310, 1.148681, 0.174850],
    [-0.026291, 0.443036, -0.130384, 0.174850, 1.830438],
];

#[rustfmt::skip]
const A18: [[f64; 5]; 5] = [
    [2.056424, 0.789862, -0.001053, 0.286197, 0.394551],
    [0.789862, 1.926544, 0.356453, 0.496827, 0.655569],
    [-0.001053, 0.356453, 1.786167, 0.239125, 0.567990],
    [0.286197, 0.496827, 0.239125, 1.686871, 0.386004],
    [0.394551, 0.655569, 0.567990, 0.386004, 1.629354],
];

#[rustfmt::skip]
const A19: [[f64; 5]; 5] = [
    [1.802565, 0.166987, 0.905863, 0.086776, 0.046025],
    [0.166987, 1.365604, 0.531934, 0.642350, 0.690117],
    [0.905863, 0.531934, 1.595893, 0.606940, -0.035464],
    [0.086776, 0.642350, 0.606940, 1.226972, 0.288470],
    [0.046025, 0.690117, -0.035464, 0.288470, 2.083496],
];
