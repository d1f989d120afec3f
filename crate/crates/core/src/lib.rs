//! Simulator and control library for robotic pruning of moving vines.
//!
//! The pipeline runs from a procedural vine ([`vine_gen`]) through spur
//! detection and pruning-point estimation ([`perception`]), whole-body
//! motion planning ([`planner`]) and force-regulated interaction with a
//! moving plant ([`nac`], [`plant_dyn`]). [`harness`] wires the pieces into
//! seeded, reproducible pruning episodes.

pub mod geometry;
pub mod harness;
pub mod nac;
pub mod perception;
pub mod planner;
pub mod plant_dyn;
pub mod vine_gen;
