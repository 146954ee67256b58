//! A desk-scale differentiable ocean dynamical core.
//!
//! A rotating shallow-water channel with a temperature tracer, written once
//! against a small set of field primitives and differentiable in forward
//! ([`autodiff::jvp`]) and reverse ([`autodiff::vjp`]) mode. On top of the
//! core sit gradient validation ([`gradcheck`]), initial-state reconstruction
//! and parameter calibration ([`calibrate`]), and the file formats and
//! command-line surface ([`io`], [`cli`]).

pub mod autodiff;
pub mod calibrate;
pub mod cli;
pub mod dyncore;
pub mod experiments;
pub mod gradcheck;
pub mod grid;
pub mod io;
