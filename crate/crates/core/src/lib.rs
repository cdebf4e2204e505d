//! From-scratch differentiable inverse rendering: joint recovery of geometry
//! (signed distance field), materials (base color, roughness, specular
//! reflectance) and lights (environment, soft visibility, implicit, and
//! photogrammetric) from posed multi-view images.
//!
//! The crate is organized around a reverse-mode tape ([`autodiff`]) that
//! supports double backward, a dense voxel feature grid with explicit
//! first/second-order kernels ([`voxel`]), the field networks ([`fields`]),
//! microfacet shading ([`brdf`], [`sampling`], [`integrator`]), SDF volume
//! rendering ([`render`]), the training objective and loop ([`objective`],
//! [`trainer`]), dataset handling ([`scene`]) and mesh export ([`mesh`]).

pub mod autodiff;
pub mod brdf;
pub mod error;
pub mod fields;
pub mod math;
pub mod params;
pub mod sampling;
pub mod voxel;
