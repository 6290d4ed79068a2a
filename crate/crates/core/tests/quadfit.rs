use cylindertag::geometry::Vec2;
use cylindertag::imgproc::{
    adaptive_threshold, label_components_with, open_region, trace_border, AreaFilter, BinaryImage, GrayImage,
};
use cylindertag::quadfit::{fit_quad, is_convex, refine_edges, FitThresholds, QuadCandidate, RefineParams};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random convex quad with sides ≥ 10 px and interior angles in [35°, 145°].
fn random_quad(rng: &mut ChaCha8Rng, size: f64) -> [Vec2; 4] {
    loop {
        let c = Vec2::new(rng.random_range(40.0..size - 40.0), rng.random_range(40.0..size - 40.0));
        let a0: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let q: [Vec2; 4] = std::array::from_fn(|i| {
            let a = a0 + i as f64 * std::f64::consts::FRAC_PI_2 + rng.random_range(-0.35..0.35);
            let r = rng.random_range(10.0..32.0);
            c + Vec2::new(a.cos(), a.sin()) * r
        });
        let ok_sides = (0..4).all(|i| (q[(i + 1) % 4] - q[i]).norm() >= 10.0);
        let ok_angles = (0..4).all(|i| {
            let u = q[(i + 3) % 4] - q[i];
            let v = q[(i + 1) % 4] - q[i];
            let ang = (u.dot(&v) / (u.norm() * v.norm())).acos().to_degrees();
            (35.0..=145.0).contains(&ang)
        });
        if ok_sides && ok_angles && is_convex(&q) {
            return q;
        }
    }
}

fn inside(q: &[Vec2; 4], p: Vec2) -> bool {
    let s: Vec<f64> = (0..4)
        .map(|i| {
            let (a, b) = (q[i], q[(i + 1) % 4]);
            (b.x - a.x) * (p.y - a.y) - (b.y - a.y) * (p.x - a.x)
        })
        .collect();
    s.iter().all(|v| *v >= 0.0) || s.iter().all(|v| *v <= 0.0)
}

/// Point-sampled rasterization: a pixel is black iff its centre is inside.
fn raster(q: &[Vec2; 4], size: usize) -> BinaryImage {
    BinaryImage::from_fn(size, size, |x, y| inside(q, Vec2::new(x as f64, y as f64)))
}

/// Area-sampled rendering (8×8 supersampling), black 30 on white 220.
fn raster_aa(q: &[Vec2; 4], size: usize) -> GrayImage {
    let mut img = GrayImage::new(size, size, 220);
    let ss = 8;
    for y in 0..size {
        for x in 0..size {
            let mut cnt = 0;
            for j in 0..ss {
                for i in 0..ss {
                    let p = Vec2::new(
                        x as f64 - 0.5 + (i as f64 + 0.5) / ss as f64,
                        y as f64 - 0.5 + (j as f64 + 0.5) / ss as f64,
                    );
                    cnt += inside(q, p) as usize;
                }
            }
            let f = cnt as f64 / (ss * ss) as f64;
            img.set(x, y, (220.0 - f * 190.0).round() as u8);
        }
    }
    img
}

fn fit(b: &BinaryImage) -> Option<QuadCandidate> {
    let f = AreaFilter {
        min_area: 24,
        max_fraction: 1.0,
    };
    let r = label_components_with(b, &f).into_iter().max_by_key(|r| r.area())?;
    let r = open_region(&r)?;
    let chain = trace_border(&r).ok()?;
    fit_quad(&chain, &r, &FitThresholds::default()).ok()
}

fn max_corner_error(q: &QuadCandidate, truth: &[Vec2; 4]) -> f64 {
    truth
        .iter()
        .map(|t| q.corners.iter().map(|c| (c - t).norm()).fold(f64::MAX, f64::min))
        .fold(0.0, f64::max)
}

#[test]
fn random_quads_recovered() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut good = 0;
    let mut misses = Vec::new();
    for _ in 0..1000 {
        let q = random_quad(&mut rng, 120.0);
        let img = raster_aa(&q, 120);
        match fit(&adaptive_threshold(&img)) {
            Some(fq) => {
                let e = max_corner_error(&refine_edges(&fq, &img, &RefineParams::default()), &q);
                if e <= 0.5 {
                    good += 1;
                } else {
                    misses.push(e);
                }
            }
            None => misses.push(f64::INFINITY),
        }
    }
    println!("recovered {good}/1000, misses {misses:?}");
    assert!(good >= 990);
}

#[test]
fn refinement_improves_corners() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let (mut better, mut total) = (0, 0);
    while total < 500 {
        let q = random_quad(&mut rng, 120.0);
        let img = raster_aa(&q, 120);
        let Some(fq) = fit(&adaptive_threshold(&img)) else {
            continue;
        };
        let r = refine_edges(&fq, &img, &RefineParams::default());
        total += 1;
        if max_corner_error(&r, &q) <= max_corner_error(&fq, &q) {
            better += 1;
        }
    }
    assert!(better >= 450, "{better}/500");
}

#[test]
fn step_edge_refined_within_tolerance() {
    for f in [0.0, 0.1, 0.25, 0.4, 0.6, 0.75, 0.9] {
        let q = [
            Vec2::new(30.0 + f, 20.0),
            Vec2::new(30.0 + f, 100.0),
            Vec2::new(90.0, 100.0),
            Vec2::new(90.0, 20.0),
        ];
        let img = raster_aa(&q, 120);
        let fq = fit(&adaptive_threshold(&img)).unwrap();
        let r = refine_edges(&fq, &img, &RefineParams::default());
        let e = max_corner_error(&r, &q);
        assert!(e <= 0.2, "offset {f}: {e}");
    }
}

#[test]
fn flat_patch_keeps_corners() {
    let q = [
        Vec2::new(20.0, 20.0),
        Vec2::new(20.0, 60.0),
        Vec2::new(70.0, 60.0),
        Vec2::new(70.0, 20.0),
    ];
    let fq = fit(&raster(&q, 100)).unwrap();
    let flat = GrayImage::new(100, 100, 128);
    let r = refine_edges(&fq, &flat, &RefineParams::default());
    for (a, b) in fq.corners.iter().zip(&r.corners) {
        assert!((a - b).norm() < 1e-12);
    }
}

#[test]
fn disk_and_triangle_rejected() {
    let disk = BinaryImage::from_fn(100, 100, |x, y| {
        let (dx, dy) = (x as f64 - 50.0, y as f64 - 50.0);
        dx * dx + dy * dy <= 400.0
    });
    assert!(fit(&disk).is_none());
    let t = [
        Vec2::new(20.0, 20.0),
        Vec2::new(80.0, 25.0),
        Vec2::new(45.0, 80.0),
        Vec2::new(45.0, 80.0),
    ];
    assert!(fit(&raster(&t, 100)).is_none());
}

#[test]
fn small_disks_rejected() {
    // small disks decompose into four short arcs, each under the line
    // tolerance
    for r10 in 70..=120 {
        let r = r10 as f64 / 10.0;
        let (cx, cy) = (40.3 + r / 7.0, 39.6);
        let disk = BinaryImage::from_fn(80, 80, |x, y| {
            let (dx, dy) = (x as f64 - cx, y as f64 - cy);
            dx * dx + dy * dy <= r * r
        });
        assert!(fit(&disk).is_none(), "r = {r}");
    }
}

#[test]
fn corners_lie_on_lines() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for _ in 0..100 {
        let q = random_quad(&mut rng, 120.0);
        if let Some(fq) = fit(&raster(&q, 120)) {
            for i in 0..4 {
                assert!(fq.lines[i].distance(&fq.corners[i]) < 1e-6);
                assert!(fq.lines[(i + 3) % 4].distance(&fq.corners[i]) < 1e-6);
            }
            assert!(fq.area() > 0.0);
        }
    }
}

#[test]
fn rotation_equivariance() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let size = 120usize;
    let m = (size - 1) as f64;
    for _ in 0..100 {
        let q = random_quad(&mut rng, 120.0);
        let b = raster(&q, size);
        // 90° rotation of the pixel grid: (x, y) -> (m - y, x)
        let rot = BinaryImage::from_fn(size, size, |x, y| b.is_black(y, size - 1 - x));
        let (Some(a), Some(r)) = (fit(&b), fit(&rot)) else {
            continue;
        };
        for c in &a.corners {
            let mapped = Vec2::new(m - c.y, c.x);
            let d = r.corners.iter().map(|p| (p - mapped).norm()).fold(f64::MAX, f64::min);
            assert!(d <= 0.1, "{d}");
        }
    }
}

#[test]
fn rectangle_coverage() {
    for (w, h) in [(20usize, 8usize), (30, 12), (45, 20)] {
        let b = BinaryImage::from_fn(100, 100, |x, y| (10..10 + w).contains(&x) && (20..20 + h).contains(&y));
        let q = fit(&b).unwrap();
        assert!(q.rac <= 0.05, "{w}x{h}: {}", q.rac);
    }
}
