//! Flat parameter vector with a named-segment map.
//!
//! Segments tile the whole vector exactly (no gaps, no overlap) and each one
//! carries a tensor shape plus a trainable flag. The convex model mode
//! freezes the embedding segment; all attribution math then lives in the
//! trainable subspace, which is the space the optimizer actually minimized
//! over.

use crate::error::{Error, Result};
use crate::tape::Bindings;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Segment {
    pub name: String,
    pub offset: usize,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamVector {
    data: Vec<f64>,
    segments: Vec<Segment>,
}

impl ParamVector {
    /// Zero-initialized vector from (name, shape, trainable) triples.
    pub fn new(layout: &[(&str, Vec<usize>, bool)]) -> Self {
        let mut segments = Vec::with_capacity(layout.len());
        let mut offset = 0;
        for (name, shape, trainable) in layout {
            let seg = Segment {
                name: (*name).to_string(),
                offset,
                shape: shape.clone(),
                trainable: *trainable,
            };
            offset += seg.len();
            segments.push(seg);
        }
        ParamVector {
            data: vec![0.0; offset],
            segments,
        }
    }

    pub fn from_data(mut proto: ParamVector, data: Vec<f64>) -> Result<Self> {
        if data.len() != proto.data.len() {
            return Err(Error::Dimension(format!(
                "parameter vector length {} does not tile the {}-long segment map",
                data.len(),
                proto.data.len()
            )));
        }
        proto.data = data;
        Ok(proto)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn segments(&self) -> &[Segment] {
        &self.segments
    }

    pub fn segment(&self, name: &str) -> Option<&Segment> {
        self.segments.iter().find(|s| s.name == name)
    }

    pub fn segment_slice(&self, name: &str) -> Option<&[f64]> {
        self.segment(name)
            .map(|s| &self.data[s.offset..s.offset + s.len()])
    }

    pub fn segment_tensor(&self, name: &str) -> Result<Tensor> {
        let seg = self
            .segment(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no segment `{name}`")))?;
        Tensor::new(
            seg.shape.clone(),
            self.data[seg.offset..seg.offset + seg.len()].to_vec(),
        )
    }

    pub fn set_segment(&mut self, name: &str, value: &Tensor) -> Result<()> {
        let seg = self
            .segment(name)
            .ok_or_else(|| Error::InvalidArgument(format!("no segment `{name}`")))?
            .clone();
        if seg.shape != value.shape() {
            return Err(Error::Dimension(format!(
                "segment `{}` has shape {:?}, got {:?}",
                name,
                seg.shape,
                value.shape()
            )));
        }
        self.data[seg.offset..seg.offset + seg.len()].copy_from_slice(value.data());
        Ok(())
    }

    /// Tape bindings with one tensor per segment, keyed by segment name.
    pub fn bindings(&self) -> Bindings {
        let mut b = Bindings::new();
        for seg in &self.segments {
            let t = Tensor::new(
                seg.shape.clone(),
                self.data[seg.offset..seg.offset + seg.len()].to_vec(),
            )
            .expect("segment shapes tile the data by construction");
            b.set(seg.name.clone(), t);
        }
        b
    }

    pub fn trainable_segments(&self) -> impl Iterator<Item = &Segment> {
        self.segments.iter().filter(|s| s.trainable)
    }

    pub fn trainable_len(&self) -> usize {
        self.trainable_segments().map(Segment::len).sum()
    }

    /// Concatenation of the trainable segments, in segment order.
    pub fn extract_trainable(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.trainable_len());
        for seg in self.trainable_segments() {
            out.extend_from_slice(&self.data[seg.offset..seg.offset + seg.len()]);
        }
        out
    }

    pub fn set_trainable(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.trainable_len());
        let mut at = 0;
        let spans: Vec<(usize, usize)> = self
            .trainable_segments()
            .map(|s| (s.offset, s.len()))
            .collect();
        for (offset, len) in spans {
            self.data[offset..offset + len].copy_from_slice(&values[at..at + len]);
            at += len;
        }
    }

    /// theta += scale * delta over the trainable coordinates.
    pub fn add_trainable(&mut self, delta: &[f64], scale: f64) {
        assert_eq!(delta.len(), self.trainable_len());
        let mut at = 0;
        let spans: Vec<(usize, usize)> = self
            .trainable_segments()
            .map(|s| (s.offset, s.len()))
            .collect();
        for (offset, len) in spans {
            for (th, dl) in self.data[offset..offset + len]
                .iter_mut()
                .zip(&delta[at..at + len])
            {
                *th += scale * dl;
            }
            at += len;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> ParamVector {
        ParamVector::new(&[
            ("emb", vec![3, 2], false),
            ("w", vec![2, 2], true),
            ("b", vec![1, 2], true),
        ])
    }

    #[test]
    fn segments_tile_exactly() {
        let p = sample();
        assert_eq!(p.len(), 6 + 4 + 2);
        let mut expect = 0;
        for seg in p.segments() {
            assert_eq!(seg.offset, expect);
            expect += seg.len();
        }
        assert_eq!(expect, p.len());
    }

    #[test]
    fn trainable_roundtrip() {
        let mut p = sample();
        assert_eq!(p.trainable_len(), 6);
        let vals: Vec<f64> = (0..6).map(|i| i as f64).collect();
        p.set_trainable(&vals);
        assert_eq!(p.extract_trainable(), vals);
        assert_eq!(&p.data()[..6], &[0.0; 6]);
        p.add_trainable(&vec![1.0; 6], -2.0);
        assert_eq!(p.extract_trainable()[0], -2.0);
    }

    #[test]
    fn from_data_validates_length() {
        let p = sample();
        assert!(ParamVector::from_data(p.clone(), vec![0.0; 11]).is_err());
        assert!(ParamVector::from_data(p, vec![0.0; 12]).is_ok());
    }
}
