//! Event logs: parsing, attribute normalisation, time windows and the
//! synthetic multi-platform generator.

mod events;
mod normalize;
mod synth;
mod window;

pub use events::{
    attr, csv_header, normalize_labels, parse_events, write_events_csv, Action, EventFormat,
    EventRecord, RawUserKey, NUM_ATTRS,
};
pub use normalize::{
    apply_normalizer, default_schema, fit_normalizer, ColumnStats, NormalizerStats, Scheme,
};
pub use synth::{
    generate_synthetic, platform_stats, PlatformSpec, PlatformStats, SyntheticData, SyntheticSpec,
};
pub use window::{window_sequences, WindowedSequence, HOUR};
