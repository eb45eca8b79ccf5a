//! Constellations, bit mapping, Nyquist pulse shaping and qubit gate envelopes.

mod constellation;
mod gate;
mod pulse;

pub use constellation::{build_constellation, map_bits, Constellation, Scheme, SymbolStream};
pub use gate::{gate_envelope, GateEnvelopeSpec, GateShape};
pub use pulse::{occupied_bandwidth, shape_filter, shape_symbols, PulseKind, PulseShape};
