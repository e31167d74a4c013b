//! C interface. Populated alongside the core crate.
