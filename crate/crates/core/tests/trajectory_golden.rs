use std::path::PathBuf;

use mvref::masking::PoseAngles;
use mvref::trajectory::{build_trajectory, render_trajectory_svg, Projection};

fn golden(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)
}

/// 81-frame arc sweeping yaw from -45 to 45 with a small pitch wobble.
fn arc() -> Vec<PoseAngles> {
    (0..81)
        .map(|k| {
            let s = k as f64 / 80.0;
            PoseAngles::new(-45.0 + 90.0 * s, 10.0 * (s * std::f64::consts::PI).sin(), 0.0)
        })
        .collect()
}

fn check(name: &str, svg: &str) {
    let path = golden(name);
    if std::env::var_os("MVREF_UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, svg).unwrap();
    }
    let want = std::fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
    assert_eq!(svg, want, "{name} differs from the recorded plot");
}

#[test]
fn arc_projections_match_recorded_svg() {
    let points = build_trajectory(&arc()).unwrap();
    for (p, name) in [(Projection::Xy, "arc_xy.svg"), (Projection::Xz, "arc_xz.svg"), (Projection::Zy, "arc_zy.svg")] {
        check(name, &render_trajectory_svg(&points, p));
    }
}

#[test]
fn svg_is_well_formed() {
    let points = build_trajectory(&arc()).unwrap();
    let svg = render_trajectory_svg(&points, Projection::Xy);
    assert!(svg.starts_with("<svg"));
    assert!(svg.trim_end().ends_with("</svg>"));
    // one marker per frame plus the origin
    assert_eq!(svg.matches("<circle").count(), 82);
}
