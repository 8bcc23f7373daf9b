//! Named verification suites: crop/recombine round trips, the permutation
//! property, attention-map normalization, and equivalence against the naive
//! oracles. The CLI `selftest` subcommand and the acceptance tests both run
//! these.

use crate::dem::{self, DemParams, FusionVariant};
use crate::encoder::FeatureGrid;
use crate::geometry::{
    global_crop, global_recombine, local_crop, local_recombine, GridSpec, ImageTensor, Perspective,
};
use crate::naive;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Outcome of one suite.
#[derive(Debug, Clone)]
pub struct SuiteOutcome {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl SuiteOutcome {
    fn pass(name: &'static str, detail: String) -> Self {
        SuiteOutcome {
            name,
            passed: true,
            detail,
        }
    }

    fn fail(name: &'static str, detail: String) -> Self {
        SuiteOutcome {
            name,
            passed: false,
            detail,
        }
    }
}

/// Tile layouts exercised by the randomized suites.
const GRID_SHAPES: [(usize, usize); 4] = [(1, 1), (2, 2), (2, 3), (3, 3)];

fn random_image(h: usize, w: usize, c: usize, rng: &mut Rng) -> ImageTensor {
    let data = (0..h * w * c).map(|_| rng.next_signed()).collect();
    ImageTensor::new(h, w, c, data).expect("random image")
}

fn random_grid(h: usize, w: usize, d: usize, rng: &mut Rng) -> FeatureGrid {
    FeatureGrid::new(h, w, d, Tensor::randn(vec![h, w, d], 1.0, rng)).expect("random grid")
}

/// `recombine(crop(x)) = x` bit-exactly, both perspectives, over `images`
/// random images drawn across the grid shapes.
pub fn roundtrip_suite(seed: u64, images: usize) -> SuiteOutcome {
    let name = "roundtrip";
    let mut rng = Rng::new(seed);
    for trial in 0..images {
        let (nw, nh) = GRID_SHAPES[trial % GRID_SHAPES.len()];
        let (ew, eh) = (1 + rng.next_below(4), 1 + rng.next_below(4));
        let c = 1 + rng.next_below(3);
        let grid = match GridSpec::new(nw * ew, nh * eh, ew, eh) {
            Ok(g) => g,
            Err(e) => return SuiteOutcome::fail(name, format!("grid setup failed: {}", e)),
        };
        let img = random_image(nh * eh, nw * ew, c, &mut rng);
        let local = local_crop(&img, &grid).and_then(|s| local_recombine(&s));
        let global = global_crop(&img, &grid).and_then(|s| global_recombine(&s));
        match (local, global) {
            (Ok(l), Ok(g)) if l == img && g == img => {}
            other => {
                return SuiteOutcome::fail(
                    name,
                    format!("trial {} ({}x{} grid) mismatch: {:?}", trial, nw, nh, other.0.is_ok()),
                )
            }
        }
    }
    SuiteOutcome::pass(name, format!("{} images bit-exact both perspectives", images))
}

/// Multiset of values is preserved by both crops.
pub fn permutation_suite(seed: u64, images: usize) -> SuiteOutcome {
    let name = "permutation";
    let mut rng = Rng::new(seed);
    for trial in 0..images {
        let (nw, nh) = GRID_SHAPES[trial % GRID_SHAPES.len()];
        let (ew, eh) = (1 + rng.next_below(4), 1 + rng.next_below(4));
        let grid = GridSpec::new(nw * ew, nh * eh, ew, eh).expect("suite grid");
        let img = random_image(nh * eh, nw * ew, 1 + rng.next_below(3), &mut rng);
        let mut source: Vec<u64> = img.data().iter().map(|v| v.to_bits()).collect();
        source.sort_unstable();
        for subs in [local_crop(&img, &grid), global_crop(&img, &grid)] {
            let subs = match subs {
                Ok(s) => s,
                Err(e) => return SuiteOutcome::fail(name, format!("crop failed: {}", e)),
            };
            let mut values: Vec<u64> = subs
                .items()
                .iter()
                .flat_map(|s| s.data().iter().map(|v| v.to_bits()))
                .collect();
            values.sort_unstable();
            if values != source {
                return SuiteOutcome::fail(name, format!("trial {} multiset differs", trial));
            }
        }
    }
    SuiteOutcome::pass(name, format!("{} images preserved as multisets", images))
}

/// Every attention row sums to 1 within 1e-6 in both directions, across
/// `draws` random parameter draws.
pub fn attention_normalization_suite(seed: u64, draws: usize) -> SuiteOutcome {
    let name = "attention_normalization";
    let mut rng = Rng::new(seed);
    let grid = GridSpec::new(4, 4, 2, 2).expect("suite grid");
    let mut worst = 0.0f64;
    for draw in 0..draws {
        let d = 2 + 2 * rng.next_below(4);
        let f_glo = random_grid(4, 4, d, &mut rng);
        let f_loc = random_grid(4, 4, d, &mut rng);
        let params = match DemParams::init(d, FusionVariant::LinearConcat, &mut rng) {
            Ok(p) => p,
            Err(e) => return SuiteOutcome::fail(name, format!("init failed: {}", e)),
        };
        for direction in [Perspective::Global, Perspective::Local] {
            let maps = match dem::attention_maps(&f_glo, &f_loc, &grid, &params, direction) {
                Ok(m) => m,
                Err(e) => return SuiteOutcome::fail(name, format!("enhance failed: {}", e)),
            };
            for map in maps {
                let (rows, cols) = (map.shape()[0], map.shape()[1]);
                for r in 0..rows {
                    let sum: f64 = map.data()[r * cols..(r + 1) * cols].iter().sum();
                    worst = worst.max((sum - 1.0).abs());
                    if (sum - 1.0).abs() > 1e-6 {
                        return SuiteOutcome::fail(
                            name,
                            format!("draw {} {:?}: row sum {}", draw, direction, sum),
                        );
                    }
                }
            }
        }
    }
    SuiteOutcome::pass(
        name,
        format!("{} draws, worst |row sum - 1| = {:.2e}", draws, worst),
    )
}

/// Both enhancement directions match the entry-wise oracle within `1e-10`
/// absolute on small grids (tile layouts up to 2x2, tokens up to 4, d <= 4).
pub fn oracle_equivalence_suite(seed: u64) -> SuiteOutcome {
    let name = "oracle_equivalence";
    let mut rng = Rng::new(seed);
    let mut worst = 0.0f64;
    for (nw, nh) in [(1, 1), (1, 2), (2, 1), (2, 2)] {
        for (wl, hl) in [(1, 1), (2, 1), (2, 2)] {
            for d in [2, 4] {
                let grid = GridSpec::new(nw * wl, nh * hl, wl, hl).expect("suite grid");
                let f_glo = random_grid(nh * hl, nw * wl, d, &mut rng);
                let f_loc = random_grid(nh * hl, nw * wl, d, &mut rng);
                let params = match DemParams::init(d, FusionVariant::LinearConcat, &mut rng) {
                    Ok(p) => p,
                    Err(e) => return SuiteOutcome::fail(name, format!("init failed: {}", e)),
                };
                for direction in [Perspective::Global, Perspective::Local] {
                    let got = match direction {
                        Perspective::Global => dem::global_enhance(&f_glo, &f_loc, &grid, &params),
                        Perspective::Local => dem::local_enhance(&f_glo, &f_loc, &grid, &params),
                    };
                    let got = match got {
                        Ok(g) => g,
                        Err(e) => return SuiteOutcome::fail(name, format!("enhance failed: {}", e)),
                    };
                    let want =
                        naive::enhance_reference(&f_glo, &f_loc, &grid, &params, direction);
                    for (g, w) in got.tensor().data().iter().zip(want.tensor().data()) {
                        let diff = (g - w).abs();
                        worst = worst.max(diff);
                        if diff > 1e-10 {
                            return SuiteOutcome::fail(
                                name,
                                format!(
                                    "{}x{} grid, {}x{} tokens, d={}, {:?}: |diff| = {:.2e}",
                                    nw, nh, wl, hl, d, direction, diff
                                ),
                            );
                        }
                    }
                }
            }
        }
    }
    SuiteOutcome::pass(name, format!("worst |diff| = {:.2e}", worst))
}

/// Run every suite with deterministic sub-seeds.
pub fn run_all(seed: u64) -> Vec<SuiteOutcome> {
    vec![
        roundtrip_suite(seed, 40),
        permutation_suite(seed.wrapping_add(1), 40),
        attention_normalization_suite(seed.wrapping_add(2), 50),
        oracle_equivalence_suite(seed.wrapping_add(3)),
    ]
}
