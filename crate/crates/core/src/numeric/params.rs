//! Flat parameter storage with named segments.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub shape: Vec<usize>,
}

impl Segment {
    pub fn new(name: impl Into<String>, shape: &[usize]) -> Self {
        Self {
            name: name.into(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// All parameters of one network in a single flat array; segment order is
/// fixed by the architecture that produced the layout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    segments: Vec<Segment>,
    data: Vec<f64>,
}

impl ParamVector {
    pub fn zeros(segments: Vec<Segment>) -> Self {
        let n = segments.iter().map(Segment::len).sum();
        Self {
            segments,
            data: vec![0.0; n],
        }
    }

    pub fn from_parts(segments: Vec<Segment>, data: Vec<f64>) -> Result<Self> {
        let n: usize = segments.iter().map(Segment::len).sum();
        if n != data.len() {
            return Err(Error::invalid(format!(
                "segments describe {n} values but {} were given",
                data.len()
            )));
        }
        Ok(Self { segments, data })
    }

    /// Unflattens `data` into this vector's layout.
    pub fn with_data(&self, data: Vec<f64>) -> Result<Self> {
        Self::from_parts(self.segments.clone(), data)
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.segments.clone())
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.clone()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    fn offset_of(&self, name: &str) -> Option<(usize, usize)> {
        let mut off = 0;
        for s in &self.segments {
            if s.name == name {
                return Some((off, s.len()));
            }
            off += s.len();
        }
        None
    }

    pub fn segment(&self, name: &str) -> Option<&[f64]> {
        self.offset_of(name).map(|(o, n)| &self.data[o..o + n])
    }

    pub fn segment_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        self.offset_of(name).map(move |(o, n)| &mut self.data[o..o + n])
    }

    pub fn same_layout(&self, other: &ParamVector) -> bool {
        self.segments == other.segments
    }

    pub fn add_scaled(&mut self, other: &ParamVector, scale: f64) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::invalid("parameter layouts differ"));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += scale * b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn layout() -> Vec<Segment> {
        vec![Segment::new("w", &[2, 3]), Segment::new("b", &[2])]
    }

    #[test]
    fn segments_address_the_right_slices() {
        let p = ParamVector::from_parts(layout(), (0..8).map(f64::from).collect()).unwrap();
        assert_eq!(p.segment("w").unwrap(), &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(p.segment("b").unwrap(), &[6.0, 7.0]);
        assert!(p.segment("missing").is_none());
    }

    #[test]
    fn wrong_length_rejected() {
        assert!(ParamVector::from_parts(layout(), vec![0.0; 7]).is_err());
    }

    proptest! {
        #[test]
        fn flatten_unflatten_roundtrip(values in proptest::collection::vec(-1e6f64..1e6, 8)) {
            let p = ParamVector::from_parts(layout(), values.clone()).unwrap();
            let q = p.with_data(p.flatten()).unwrap();
            prop_assert_eq!(q.data(), &values[..]);
            prop_assert_eq!(q, p);
        }
    }
}
