use fa_core::synthkit::{generate_frame, ColonBand, SynthParams, EMISSION_FLOOR};
use fa_core::DistalDirection;
use image::RgbImage;
use proptest::prelude::*;

const STRIP: u32 = 100;
const GREEN: usize = 1;

/// Mean green value inside the colon band for each 100 px strip, spatial order.
fn strip_means(image: &RgbImage, band: ColonBand) -> Vec<(u32, u32, f64)> {
    let w = image.width();
    (0..w.div_ceil(STRIP))
        .map(|i| {
            let (x0, x1) = (i * STRIP, ((i + 1) * STRIP).min(w));
            let mut sum = 0.0;
            for y in band.top..band.bottom {
                for x in x0..x1 {
                    sum += image.get_pixel(x, y)[GREEN] as f64;
                }
            }
            (x0, x1, sum / ((x1 - x0) * band.height()) as f64)
        })
        .collect()
}

fn params() -> impl Strategy<Value = SynthParams> {
    (
        300u32..1000,
        120u32..300,
        any::<u64>(),
        5.0f64..60.0,
        0.0f64..6.0,
        any::<bool>(),
        0.5f64..=1.0,
        prop_oneof![Just(1.0), 0.0f64..0.3],
    )
        .prop_flat_map(
            |(width, height, seed, falloff, noise, decreasing, gain, exposure)| {
                (
                    Just((width, height, seed, falloff, noise, decreasing, gain, exposure)),
                    0..width,
                    10..height / 2,
                )
            },
        )
        .prop_map(
            |((width, height, seed, falloff, noise, decreasing, gain, exposure), boundary, top)| {
                SynthParams {
                    width,
                    height,
                    colon_band: ColonBand {
                        top,
                        bottom: height - 10,
                    },
                    boundary_x: Some(boundary),
                    falloff_width: falloff,
                    fluorescence_gain: gain,
                    noise_sigma: noise,
                    exposure,
                    distal_direction: if decreasing {
                        DistalDirection::DecreasingX
                    } else {
                        DistalDirection::IncreasingX
                    },
                    seed,
                    ..SynthParams::default()
                }
            },
        )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn front_is_monotone_distally(p in params()) {
        let frame = generate_frame(&p).unwrap();
        let mut means: Vec<f64> = strip_means(&frame.image, p.colon_band).into_iter().map(|s| s.2).collect();
        if p.distal_direction == DistalDirection::DecreasingX {
            means.reverse();
        }
        for pair in means.windows(2) {
            prop_assert!(pair[1] <= pair[0] + 2.0 * p.noise_sigma, "{means:?}");
        }
    }

    #[test]
    fn strips_away_from_the_front_match_truth(p in params()) {
        let frame = generate_frame(&p).unwrap();
        // calibrate green to a fraction of saturation with noiseless renders of the same tissue
        let flat = |gain: f64| {
            let q = SynthParams { boundary_x: None, fluorescence_gain: gain, noise_sigma: 0.0, ..p.clone() };
            strip_means(&generate_frame(&q).unwrap().image, p.colon_band)
        };
        let (dark, lit) = (flat(0.0), flat(1.0));
        let b = p.boundary_x.unwrap() as f64;
        let reach = p.falloff_width;
        for (i, &(x0, x1, g)) in strip_means(&frame.image, p.colon_band).iter().enumerate() {
            let fraction = (g - dark[i].2) / (lit[i].2 - dark[i].2);
            let (x0, x1) = (x0 as f64, x1 as f64);
            let (proximal, distal) = match p.distal_direction {
                DistalDirection::IncreasingX => (x1 <= b - reach, x0 >= b + reach),
                DistalDirection::DecreasingX => (x0 >= b + reach, x1 <= b - reach),
            };
            if proximal {
                prop_assert!(fraction >= 0.8 * p.fluorescence_gain, "strip {i}: {fraction}");
            }
            if distal {
                prop_assert!(fraction <= EMISSION_FLOOR, "strip {i}: {fraction}");
            }
        }
    }
}
