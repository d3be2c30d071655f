// SPDX-License-Identifier: MIT OR Apache-2.0

//! Criterion benchmarks for the cloom kernels live in `benches/`.
