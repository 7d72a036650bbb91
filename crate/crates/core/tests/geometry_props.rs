use nalgebra::Vector3;
use proptest::prelude::*;

use mvboot::geometry::{refine_triangulation, triangulate_linear, CameraView, LmConfig, Observation, Point2D, Point3D};

fn unit(azimuth: f64, elevation: f64) -> Vector3<f64> {
    Vector3::new(elevation.cos() * azimuth.cos(), elevation.cos() * azimuth.sin(), elevation.sin())
}

/// Cameras on a sphere of radius 150–250 looking roughly at the origin.
fn cameras() -> impl Strategy<Value = Vec<CameraView>> {
    prop::collection::vec((0.0..std::f64::consts::TAU, -1.2f64..1.2, 150.0f64..250.0, -10.0f64..10.0, 300.0f64..2000.0), 2..9)
        .prop_filter_map("degenerate camera", |specs| {
            specs
                .iter()
                .enumerate()
                .map(|(i, &(az, el, r, jitter, focal))| {
                    let eye = Point3D::from(unit(az, el) * r);
                    let target = Point3D::new(jitter, -jitter, 0.5 * jitter);
                    CameraView::look_at(i, eye, target, Vector3::z(), focal, 1920, 1080).ok()
                })
                .collect::<Option<Vec<_>>>()
        })
        .prop_filter("cameras too close together", |cams| {
            cams.iter().enumerate().all(|(i, a)| cams[..i].iter().all(|b| (a.center() - b.center()).norm() > 20.0))
        })
}

fn point() -> impl Strategy<Value = Point3D> {
    (-30.0f64..30.0, -30.0f64..30.0, -30.0f64..30.0).prop_map(|(x, y, z)| Point3D::new(x, y, z))
}

fn offset() -> impl Strategy<Value = Vector3<f64>> {
    (-2.0f64..2.0, -2.0f64..2.0, -2.0f64..2.0).prop_map(|(x, y, z)| Vector3::new(x, y, z))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn refinement_recovers_exact_projections(cams in cameras(), x in point(), start in offset()) {
        let obs: Vec<Observation> = cams.iter().map(|c| Observation::new(c, c.project(&x).unwrap())).collect();
        let r = refine_triangulation(x + start, &obs, &LmConfig::default()).unwrap();
        prop_assert!((r.point - x).norm() < 1e-6, "error {}", (r.point - x).norm());
        prop_assert!(r.cost <= r.initial_cost);

        let linear = triangulate_linear(&obs).unwrap();
        prop_assert!((linear - x).norm() < 1e-6);
    }

    #[test]
    fn refinement_never_increases_cost(cams in cameras(), x in point(), start in offset(), noise in prop::collection::vec((-5.0f64..5.0, -5.0f64..5.0), 8)) {
        let obs: Vec<Observation> = cams
            .iter()
            .zip(&noise)
            .map(|(c, &(dx, dy))| {
                let p = c.project(&x).unwrap();
                Observation::new(c, Point2D::new(p.x + dx, p.y + dy))
            })
            .collect();
        let r = refine_triangulation(x + start, &obs, &LmConfig::default()).unwrap();
        prop_assert!(r.cost <= r.initial_cost);
        let recomputed: f64 = obs.iter().map(|o| (o.camera.project(&r.point).unwrap() - o.pixel).norm_squared()).sum();
        prop_assert!((recomputed - r.cost).abs() <= 1e-9 * (1.0 + r.cost));
        for (o, e) in obs.iter().zip(&r.residuals) {
            prop_assert!(((o.camera.project(&r.point).unwrap() - o.pixel).norm() - e).abs() < 1e-9);
        }
    }
}
