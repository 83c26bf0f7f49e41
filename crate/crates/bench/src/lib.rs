//! Fixtures shared by the benchmarks.

use glshrink_core::simgen::{generate, spec_table, synthetic_observed_v, VSource};
use glshrink_core::SourcePanel;

/// A 62-area, two-source panel from Case 1, row 4 of the simulation grid.
pub fn county_panel(seed: u64) -> SourcePanel {
    let spec = spec_table(1).expect("case 1")[3].clone();
    let v = VSource::Fixed(synthetic_observed_v(spec.n_areas, spec.n_sources, seed));
    generate(&spec, &v, seed, 0).expect("valid specification").panel
}
