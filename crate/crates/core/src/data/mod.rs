//! Panel ingestion, normalization, training windows, epi-weeks and the
//! synthetic world generator.

mod epiweek;
mod normalize;
mod panel;
mod synth;
mod window;

pub use epiweek::{epiweek_aggregate, epiweek_start, EpiWeek};
pub use normalize::{
    denormalize_cases, denormalize_mobility, encode_day, mobility_feature_width, normalize, ChannelStats,
    DayFeatures, NormalizationStats, NormalizedPanel, Transform, CASE_FEATURES, MIN_STD, WEEKDAYS,
};
pub use panel::{
    load_panel, load_panel_dir, weekday_index, LoadedPanel, PanelDataset, CASES_FILE, MOBILITY_FILE,
    POPULATION_FILE,
};
pub use synth::{synth_generate, synth_simulate, weekday_factor, write_synth, SynthConfig, SynthRun, PROVENANCE_FILE};
pub use window::{build_windows, window_spans, RawDay, RawWindow, WindowSample};
