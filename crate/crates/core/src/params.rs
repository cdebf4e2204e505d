//! Trainable parameter storage shared by all field networks and the voxel grid.
//!
//! Parameters are owned here and read-shared by worker tapes during a step;
//! only the optimizer mutates them, between steps.

use crate::autodiff::Shape;
use crate::math::Real;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Grid geometry attached to a voxel-feature parameter.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridMeta {
    /// Nodes per axis.
    pub dims: [usize; 3],
    pub channels: usize,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
}

impl GridMeta {
    pub fn node_count(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    pub fn len(&self) -> usize {
        self.node_count() * self.channels
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// World-to-grid scale per axis: s = G / (M - m).
    pub fn scale<T: Real>(&self) -> [T; 3] {
        let mut s = [T::zero(); 3];
        for a in 0..3 {
            s[a] = T::from_f64(self.dims[a] as f64 / (self.bounds_max[a] - self.bounds_min[a]))
                .unwrap();
        }
        s
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamKind {
    /// Dense weight matrix; subject to weight decay.
    Weight,
    /// Bias vector; excluded from weight decay.
    Bias,
    /// Voxel grid features; subject to weight decay.
    Grid,
    /// Free scalar (e.g. the transmittance sharpness); excluded from decay.
    Scalar,
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Shape,
    pub data: Vec<T>,
    pub grid: Option<GridMeta>,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    by_name: HashMap<String, ParamId>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { entries: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: &str, kind: ParamKind, shape: Shape, data: Vec<T>) -> ParamId {
        assert_eq!(shape.len(), data.len(), "parameter {name}: shape/data mismatch");
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            kind,
            shape,
            data,
            grid: None,
        });
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn register_grid(&mut self, name: &str, meta: GridMeta, data: Vec<T>) -> ParamId {
        assert_eq!(meta.len(), data.len(), "grid {name}: meta/data mismatch");
        let id = self.register(name, ParamKind::Grid, Shape::new(meta.node_count(), meta.channels), data);
        self.entries[id.0].grid = Some(meta);
        id
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<T> {
        &self.entries[id.0]
    }

    pub fn data(&self, id: ParamId) -> &[T] {
        &self.entries[id.0].data
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.entries[id.0].data
    }

    pub fn shape(&self, id: ParamId) -> Shape {
        self.entries[id.0].shape
    }

    pub fn grid_meta(&self, id: ParamId) -> &GridMeta {
        self.entries[id.0]
            .grid
            .as_ref()
            .expect("parameter is not a voxel grid")
    }

    pub fn lookup(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    /// Total scalar count across all parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }
}
