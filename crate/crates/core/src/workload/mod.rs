//! Request streams: CSV trace replay and a seeded synthetic generator.

mod generator;
mod summary;
mod trace;

pub use generator::{
    default_images_per_request, fit_power_law_alpha, generate, sample_power_law, BurstEpisode,
    Diurnal, Generator, GeneratorConfig, ImageDimDist, OutputLenDist, ServiceMix, Weighted,
    MAX_IMAGES_PER_REQUEST,
};
pub use summary::{summarize, summarize_with_window, ServiceSummary, Spread, WorkloadSummary};
pub use trace::{
    load_trace, parse_trace, write_trace, LoadedTrace, TraceRecord, MAX_MALFORMED_FRACTION,
    TRACE_HEADER,
};
