//! Browser demo of the `vipaint` library, compiled to WebAssembly with
//! `wasm-bindgen`. Everything runs on a built-in two-mode Gaussian-mixture
//! prior in the plane, so each interactive operation returns a fully
//! self-contained SVG string the page can drop into the DOM:
//!
//! * [`diffusion_scene`] — the prior smoothed by forward diffusion at a
//!   chosen noise level;
//! * [`denoiser_scene`] — the exact posterior-mean denoising field at a
//!   chosen noise level;
//! * [`inference_scene`] — hierarchical posterior fitting plus refinement,
//!   overlaid on samples from the closed-form posterior for a chosen
//!   observation of the first coordinate.
//!
//! Build with `wasm-pack build crates/demo --target web` and serve the
//! repository root so `www/index.html` can load the generated package.
//! All functions are plain Rust on native targets, which is what the unit
//! tests exercise.

use std::fmt::Write as _;

use wasm_bindgen::prelude::*;

use vipaint::denoiser::gmm::GmmDenoiser;
use vipaint::denoiser::Denoiser;
use vipaint::gmm::{exact_posterior, GmmPrior};
use vipaint::operators::{fill_observation, LinearOp, MeasurementOp};
use vipaint::rng;
use vipaint::schedule::NoiseSchedule;
use vipaint::vipaint::{init_params, optimize, phase2_sample, VipaintConfig};

/// Rendered scenes are square, in pixels.
const SIZE: f64 = 560.0;
/// Half-width of the data window mapped onto the scene.
const EXTENT: f64 = 3.3;
/// Largest noise level the sliders expose; also the schedule horizon.
const SIGMA_MAX: f64 = 3.0;

fn schedule() -> NoiseSchedule {
    NoiseSchedule::ve(0.01, SIGMA_MAX).expect("fixed demo schedule is valid")
}

/// The demo prior: two well-separated modes with mild anti-correlation
/// between the coordinates (same shape as the library's test fixtures).
fn prior() -> GmmPrior {
    GmmPrior::new(
        vec![0.5, 0.5],
        vec![vec![-2.0, 0.5], vec![2.0, -0.5]],
        vec![vec![0.04, 0.04], vec![0.04, 0.04]],
    )
    .expect("fixed demo prior is valid")
}

/// Data x-coordinate to pixel column.
fn px(v: f64) -> f64 {
    (v + EXTENT) / (2.0 * EXTENT) * SIZE
}

/// Data y-coordinate to pixel row (flipped so +y points up).
fn py(v: f64) -> f64 {
    SIZE - (v + EXTENT) / (2.0 * EXTENT) * SIZE
}

fn open_svg(out: &mut String) {
    let _ = write!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SIZE} {SIZE}" width="{SIZE}" height="{SIZE}" font-family="sans-serif">"#
    );
    let _ = write!(
        out,
        r##"<rect width="{SIZE}" height="{SIZE}" fill="#fcfcfa"/>"##
    );
    // Axes through the origin.
    let _ = write!(
        out,
        r##"<line x1="0" y1="{m}" x2="{SIZE}" y2="{m}" stroke="#ddd"/><line x1="{m}" y1="0" x2="{m}" y2="{SIZE}" stroke="#ddd"/>"##,
        m = SIZE / 2.0
    );
}

fn caption(out: &mut String, text: &str) {
    let _ = write!(
        out,
        r##"<text x="12" y="24" font-size="16" fill="#333">{text}</text>"##
    );
}

fn circle(out: &mut String, class: &str, x: f64, y: f64, r: f64, style: &str) {
    let _ = write!(
        out,
        r#"<circle class="{class}" cx="{:.2}" cy="{:.2}" r="{r}" {style}/>"#,
        px(x),
        py(y)
    );
}

/// The prior pushed through forward diffusion to noise level `sigma`:
/// component two-standard-deviation ellipses plus a sample cloud.
#[wasm_bindgen]
pub fn diffusion_scene(sigma: f64) -> String {
    let sigma = sigma.clamp(0.0, SIGMA_MAX);
    let prior = prior();
    let mut out = String::new();
    open_svg(&mut out);

    // Under the variance-exploding forward process the smoothed component
    // covariance is the clean covariance plus sigma^2 on the diagonal.
    for k in 0..2 {
        let m = [[-2.0, 0.5], [2.0, -0.5]][k];
        let s = (0.04 + sigma * sigma).sqrt();
        let r = 2.0 * s / (2.0 * EXTENT) * SIZE;
        let _ = write!(
            out,
            r##"<ellipse cx="{:.2}" cy="{:.2}" rx="{r:.2}" ry="{r:.2}" fill="#4a7fb5" fill-opacity="0.12" stroke="#4a7fb5" stroke-opacity="0.6"/>"##,
            px(m[0]),
            py(m[1]),
        );
    }

    let clean = prior.sample(240, 7);
    let mut noise = rng::stream(7, "demo-diffuse");
    for x in &clean {
        let e = rng::normal_vec(&mut noise, 2);
        circle(
            &mut out,
            "pt",
            x[0] + sigma * e[0],
            x[1] + sigma * e[1],
            2.2,
            r##"fill="#2b5d8e" fill-opacity="0.55""##,
        );
    }

    caption(&mut out, &format!("forward diffusion, sigma = {sigma:.2}"));
    out.push_str("</svg>");
    out
}

/// The exact denoising field at noise level `sigma`: arrows from grid states
/// z to the posterior-mean prediction x-hat(z, sigma).
#[wasm_bindgen]
pub fn denoiser_scene(sigma: f64) -> String {
    let sigma = sigma.clamp(0.05, SIGMA_MAX);
    let sched = schedule();
    let den = GmmDenoiser::new(prior(), sched.clone());
    let mut out = String::new();
    open_svg(&mut out);
    let _ = write!(
        out,
        r##"<defs><marker id="tip" viewBox="0 0 8 8" refX="7" refY="4" markerWidth="5" markerHeight="5" orient="auto"><path d="M0,0 L8,4 L0,8 z" fill="#b5564a"/></marker></defs>"##
    );

    let n = 11;
    for i in 0..n {
        for j in 0..n {
            let z = [
                -3.0 + 6.0 * i as f64 / (n - 1) as f64,
                -3.0 + 6.0 * j as f64 / (n - 1) as f64,
            ];
            let xh = den
                .x_hat(&sched, &z, sigma)
                .expect("demo grid states are finite");
            let _ = write!(
                out,
                r##"<line class="arrow" x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#b5564a" stroke-opacity="0.75" marker-end="url(#tip)"/>"##,
                px(z[0]),
                py(z[1]),
                px(xh[0]),
                py(xh[1]),
            );
        }
    }
    for m in [[-2.0, 0.5], [2.0, -0.5]] {
        circle(&mut out, "mode", m[0], m[1], 5.0, r##"fill="#333""##);
    }

    caption(
        &mut out,
        &format!("posterior-mean denoising field, sigma = {sigma:.2}"),
    );
    out.push_str("</svg>");
    out
}

/// Fit the hierarchical posterior to the observation `x0 = y` (Gaussian
/// noise `sigma_v`), refine it to clean samples, and overlay the result on
/// samples from the closed-form posterior.
#[wasm_bindgen]
pub fn inference_scene(y: f64, sigma_v: f64, seed: u32) -> String {
    let y_obs = vec![y.clamp(-3.0, 3.0)];
    let sigma_v = sigma_v.clamp(0.05, 2.0);
    let sched = schedule();
    let prior = prior();
    let den = GmmDenoiser::new(prior.clone(), sched.clone());
    let op = MeasurementOp::gaussian(LinearOp::mask(vec![true, false]).unwrap(), sigma_v)
        .expect("demo operator is valid");

    let mut cfg = VipaintConfig::new(vec![2.2, 1.5]);
    cfg.chains = 2;
    cfg.opt_steps = 40;
    cfg.phase2.steps = 60;
    // Tight observations benefit from residual guidance during refinement;
    // loose ones are represented by the fitted mode weights alone.
    cfg.phase2.zeta = if sigma_v <= 0.3 { 0.3 } else { 0.0 };

    let seed = seed as u64;
    let y_filled = fill_observation(&op, &y_obs, 2).expect("mask fill");
    let p0 = init_params(&cfg, &sched, &y_filled, seed).expect("init");
    let (fitted, _) = optimize(&p0, &cfg, &sched, &den, &op, &y_obs, seed).expect("fit");
    let vip = phase2_sample(&fitted, &cfg, &sched, &den, &op, &y_obs, 24, seed).expect("refine");

    let oracle = exact_posterior(&prior, &op, &y_obs)
        .expect("gaussian mask observation has a closed-form posterior")
        .sample(200, 1234);

    let mut out = String::new();
    open_svg(&mut out);

    // Observation band: x0 within one noise standard deviation of y.
    let _ = write!(
        out,
        r##"<rect x="{:.2}" y="0" width="{:.2}" height="{SIZE}" fill="#c9a227" fill-opacity="0.15"/><line x1="{:.2}" y1="0" x2="{:.2}" y2="{SIZE}" stroke="#c9a227"/>"##,
        px(y_obs[0] - sigma_v),
        (2.0 * sigma_v) / (2.0 * EXTENT) * SIZE,
        px(y_obs[0]),
        px(y_obs[0]),
    );

    for s in &oracle {
        circle(
            &mut out,
            "oracle",
            s[0],
            s[1],
            2.5,
            r##"fill="#999" fill-opacity="0.5""##,
        );
    }
    for s in &vip {
        circle(
            &mut out,
            "vip",
            s[0],
            s[1],
            3.5,
            r##"fill="#d9662c" stroke="#7a3310""##,
        );
    }

    caption(
        &mut out,
        &format!(
            "fitted posterior (orange) vs exact (gray), y = {:.2}, sigma_v = {sigma_v:.2}",
            y_obs[0]
        ),
    );
    out.push_str("</svg>");
    out
}
