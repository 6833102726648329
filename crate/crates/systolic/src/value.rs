//! Runtime scalar/tensor values and bindings of program names to values.

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::EvalError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ElemType {
    Int,
    Float,
}

impl fmt::Display for ElemType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ElemType::Int => write!(f, "int"),
            ElemType::Float => write!(f, "float"),
        }
    }
}

/// A single runtime value. Comparisons and logic ops evaluate to `Int` 0/1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Scalar {
    Int(i64),
    Float(f64),
}

impl Scalar {
    pub fn zero(t: ElemType) -> Scalar {
        match t {
            ElemType::Int => Scalar::Int(0),
            ElemType::Float => Scalar::Float(0.0),
        }
    }

    pub fn as_f64(self) -> f64 {
        match self {
            Scalar::Int(v) => v as f64,
            Scalar::Float(v) => v,
        }
    }

    pub fn as_index(self) -> Result<i64, EvalError> {
        match self {
            Scalar::Int(v) => Ok(v),
            Scalar::Float(v) => Err(EvalError::NonIntegerIndex(v)),
        }
    }

    pub fn truthy(self) -> bool {
        match self {
            Scalar::Int(v) => v != 0,
            Scalar::Float(v) => v != 0.0,
        }
    }

    pub fn elem_type(self) -> ElemType {
        match self {
            Scalar::Int(_) => ElemType::Int,
            Scalar::Float(_) => ElemType::Float,
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Int(v) => write!(f, "{v}"),
            Scalar::Float(v) => write!(f, "{v}"),
        }
    }
}

fn promote(a: Scalar, b: Scalar) -> (Scalar, Scalar) {
    match (a, b) {
        (Scalar::Int(x), Scalar::Float(_)) => (Scalar::Float(x as f64), b),
        (Scalar::Float(_), Scalar::Int(y)) => (a, Scalar::Float(y as f64)),
        _ => (a, b),
    }
}

pub fn scalar_add(a: Scalar, b: Scalar) -> Scalar {
    match promote(a, b) {
        (Scalar::Int(x), Scalar::Int(y)) => Scalar::Int(x.wrapping_add(y)),
        (Scalar::Float(x), Scalar::Float(y)) => Scalar::Float(x + y),
        _ => unreachable!(),
    }
}

pub fn scalar_sub(a: Scalar, b: Scalar) -> Scalar {
    match promote(a, b) {
        (Scalar::Int(x), Scalar::Int(y)) => Scalar::Int(x.wrapping_sub(y)),
        (Scalar::Float(x), Scalar::Float(y)) => Scalar::Float(x - y),
        _ => unreachable!(),
    }
}

pub fn scalar_mul(a: Scalar, b: Scalar) -> Scalar {
    match promote(a, b) {
        (Scalar::Int(x), Scalar::Int(y)) => Scalar::Int(x.wrapping_mul(y)),
        (Scalar::Float(x), Scalar::Float(y)) => Scalar::Float(x * y),
        _ => unreachable!(),
    }
}

pub fn scalar_div(a: Scalar, b: Scalar) -> Result<Scalar, EvalError> {
    match promote(a, b) {
        (Scalar::Int(x), Scalar::Int(y)) => {
            if y == 0 {
                Err(EvalError::DivisionByZero)
            } else {
                Ok(Scalar::Int(x.div_euclid(y)))
            }
        }
        (Scalar::Float(x), Scalar::Float(y)) => {
            if y == 0.0 {
                Err(EvalError::DivisionByZero)
            } else {
                Ok(Scalar::Float(x / y))
            }
        }
        _ => unreachable!(),
    }
}

pub fn scalar_mod(a: Scalar, b: Scalar) -> Result<Scalar, EvalError> {
    match promote(a, b) {
        (Scalar::Int(x), Scalar::Int(y)) => {
            if y == 0 {
                Err(EvalError::DivisionByZero)
            } else {
                Ok(Scalar::Int(x.rem_euclid(y)))
            }
        }
        (Scalar::Float(x), Scalar::Float(y)) => {
            if y == 0.0 {
                Err(EvalError::DivisionByZero)
            } else {
                Ok(Scalar::Float(x % y))
            }
        }
        _ => unreachable!(),
    }
}

pub fn scalar_min(a: Scalar, b: Scalar) -> Scalar {
    match promote(a, b) {
        (Scalar::Int(x), Scalar::Int(y)) => Scalar::Int(x.min(y)),
        (Scalar::Float(x), Scalar::Float(y)) => Scalar::Float(x.min(y)),
        _ => unreachable!(),
    }
}

pub fn scalar_max(a: Scalar, b: Scalar) -> Scalar {
    match promote(a, b) {
        (Scalar::Int(x), Scalar::Int(y)) => Scalar::Int(x.max(y)),
        (Scalar::Float(x), Scalar::Float(y)) => Scalar::Float(x.max(y)),
        _ => unreachable!(),
    }
}

fn bool_scalar(v: bool) -> Scalar {
    Scalar::Int(if v { 1 } else { 0 })
}

pub fn scalar_lt(a: Scalar, b: Scalar) -> Scalar {
    match promote(a, b) {
        (Scalar::Int(x), Scalar::Int(y)) => bool_scalar(x < y),
        (Scalar::Float(x), Scalar::Float(y)) => bool_scalar(x < y),
        _ => unreachable!(),
    }
}

pub fn scalar_le(a: Scalar, b: Scalar) -> Scalar {
    match promote(a, b) {
        (Scalar::Int(x), Scalar::Int(y)) => bool_scalar(x <= y),
        (Scalar::Float(x), Scalar::Float(y)) => bool_scalar(x <= y),
        _ => unreachable!(),
    }
}

pub fn scalar_eq(a: Scalar, b: Scalar) -> Scalar {
    match promote(a, b) {
        (Scalar::Int(x), Scalar::Int(y)) => bool_scalar(x == y),
        (Scalar::Float(x), Scalar::Float(y)) => bool_scalar(x == y),
        _ => unreachable!(),
    }
}

/// A dense row-major tensor with an origin offset, so index domains may
/// include negative boundary indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub elem: ElemType,
    pub origin: Vec<i64>,
    pub shape: Vec<usize>,
    pub data: Vec<Scalar>,
}

impl Tensor {
    pub fn zeros(elem: ElemType, origin: Vec<i64>, shape: Vec<usize>) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor {
            elem,
            origin,
            shape,
            data: vec![Scalar::zero(elem); n],
        }
    }

    pub fn from_rows_f64(rows: &[Vec<f64>]) -> Tensor {
        let r = rows.len();
        let c = rows.first().map(|x| x.len()).unwrap_or(0);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows");
            data.extend(row.iter().map(|&v| Scalar::Float(v)));
        }
        Tensor {
            elem: ElemType::Float,
            origin: vec![0, 0],
            shape: vec![r, c],
            data,
        }
    }

    pub fn from_vec_i64(v: &[i64]) -> Tensor {
        Tensor {
            elem: ElemType::Int,
            origin: vec![0],
            shape: vec![v.len()],
            data: v.iter().map(|&x| Scalar::Int(x)).collect(),
        }
    }

    pub fn from_vec_f64(v: &[f64]) -> Tensor {
        Tensor {
            elem: ElemType::Float,
            origin: vec![0],
            shape: vec![v.len()],
            data: v.iter().map(|&x| Scalar::Float(x)).collect(),
        }
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    fn flat_index(&self, idx: &[i64]) -> Option<usize> {
        if idx.len() != self.shape.len() {
            return None;
        }
        let mut flat = 0usize;
        for (d, &i) in idx.iter().enumerate() {
            let rel = i - self.origin[d];
            if rel < 0 || rel as usize >= self.shape[d] {
                return None;
            }
            flat = flat * self.shape[d] + rel as usize;
        }
        Some(flat)
    }

    pub fn get(&self, idx: &[i64]) -> Option<Scalar> {
        self.flat_index(idx).map(|f| self.data[f])
    }

    pub fn set(&mut self, idx: &[i64], v: Scalar) -> bool {
        match self.flat_index(idx) {
            Some(f) => {
                self.data[f] = v;
                true
            }
            None => false,
        }
    }

    /// Build the smallest dense tensor covering a sparse element map.
    pub fn from_elems(elem: ElemType, elems: &BTreeMap<Vec<i64>, Scalar>) -> Option<Tensor> {
        let first = elems.keys().next()?;
        let rank = first.len();
        let mut lo = first.clone();
        let mut hi = first.clone();
        for k in elems.keys() {
            assert_eq!(k.len(), rank, "mixed-rank element map");
            for d in 0..rank {
                lo[d] = lo[d].min(k[d]);
                hi[d] = hi[d].max(k[d]);
            }
        }
        let shape: Vec<usize> = (0..rank).map(|d| (hi[d] - lo[d] + 1) as usize).collect();
        let mut t = Tensor::zeros(elem, lo, shape);
        for (k, &v) in elems {
            t.set(k, v);
        }
        Some(t)
    }
}

/// One bound value: a scalar (runtime parameter or symbolic constant) or a
/// tensor (matrix parameter).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Bound {
    Scalar(Scalar),
    Tensor(Tensor),
}

/// Concrete values for every parameter and symbolic constant of a program.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Binding {
    pub values: BTreeMap<String, Bound>,
}

impl Binding {
    pub fn new() -> Binding {
        Binding::default()
    }

    pub fn set_scalar(&mut self, name: &str, v: i64) -> &mut Self {
        self.values
            .insert(name.to_string(), Bound::Scalar(Scalar::Int(v)));
        self
    }

    pub fn set_float(&mut self, name: &str, v: f64) -> &mut Self {
        self.values
            .insert(name.to_string(), Bound::Scalar(Scalar::Float(v)));
        self
    }

    pub fn set_tensor(&mut self, name: &str, t: Tensor) -> &mut Self {
        self.values.insert(name.to_string(), Bound::Tensor(t));
        self
    }

    pub fn scalar(&self, name: &str) -> Option<Scalar> {
        match self.values.get(name) {
            Some(Bound::Scalar(s)) => Some(*s),
            _ => None,
        }
    }

    pub fn int(&self, name: &str) -> Option<i64> {
        match self.scalar(name)? {
            Scalar::Int(v) => Some(v),
            Scalar::Float(_) => None,
        }
    }

    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        match self.values.get(name) {
            Some(Bound::Tensor(t)) => Some(t),
            _ => None,
        }
    }

    pub fn contains(&self, name: &str) -> bool {
        self.values.contains_key(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_origin_offset_indexing() {
        let mut t = Tensor::zeros(ElemType::Int, vec![-1, -1], vec![3, 3]);
        assert!(t.set(&[-1, -1], Scalar::Int(7)));
        assert_eq!(t.get(&[-1, -1]), Some(Scalar::Int(7)));
        assert_eq!(t.get(&[1, 1]), Some(Scalar::Int(0)));
        assert_eq!(t.get(&[2, 0]), None);
    }

    #[test]
    fn from_elems_covers_bounding_box() {
        let mut m = BTreeMap::new();
        m.insert(vec![2i64], Scalar::Int(5));
        m.insert(vec![4i64], Scalar::Int(9));
        let t = Tensor::from_elems(ElemType::Int, &m).unwrap();
        assert_eq!(t.origin, vec![2]);
        assert_eq!(t.shape, vec![3]);
        assert_eq!(t.get(&[3]), Some(Scalar::Int(0)));
        assert_eq!(t.get(&[4]), Some(Scalar::Int(9)));
    }

    #[test]
    fn int_division_is_floor() {
        let d = scalar_div(Scalar::Int(7), Scalar::Int(2)).unwrap();
        assert_eq!(d, Scalar::Int(3));
        assert!(scalar_div(Scalar::Int(1), Scalar::Int(0)).is_err());
    }
}
