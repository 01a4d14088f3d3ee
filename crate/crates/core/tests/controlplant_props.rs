use nalgebra::{DMatrix, DVector};
use qkdncs::controlplant::{
    kalman_predict, kalman_update, plant_step, KalmanState, PIController, PlantModel, DEFAULT_CLAMP, DEFAULT_KI,
    DEFAULT_KP,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type M2 = [[f64; 2]; 2];

fn mul(a: &M2, b: &M2) -> M2 {
    let mut o = [[0.0; 2]; 2];
    for i in 0..2 {
        for j in 0..2 {
            o[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
        }
    }
    o
}

fn tr(a: &M2) -> M2 {
    [[a[0][0], a[1][0]], [a[0][1], a[1][1]]]
}

/// Prior-covariance Riccati recurrence for `C = [1, 0]`, iterated on plain
/// arrays until it stops moving.
fn riccati_fixed_point(a: &M2, q: &M2, r: f64) -> M2 {
    let mut p = [[1.0, 0.0], [0.0, 1.0]];
    for _ in 0..200_000 {
        // Posterior with scalar innovation p00 + r.
        let s = p[0][0] + r;
        let k = [p[0][0] / s, p[1][0] / s];
        let post = [
            [p[0][0] - k[0] * p[0][0], p[0][1] - k[0] * p[0][1]],
            [p[1][0] - k[1] * p[0][0], p[1][1] - k[1] * p[0][1]],
        ];
        let mut next = mul(&mul(a, &post), &tr(a));
        for i in 0..2 {
            for j in 0..2 {
                next[i][j] += q[i][j];
            }
        }
        let delta = (0..2)
            .flat_map(|i| (0..2).map(move |j| (i, j)))
            .map(|(i, j)| (next[i][j] - p[i][j]).abs())
            .fold(0.0, f64::max);
        p = next;
        if delta < 1e-15 {
            break;
        }
    }
    p
}

#[test]
fn scalar_riccati_reaches_closed_form() {
    let model = PlantModel::new(
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, 0.0),
        DMatrix::from_element(1, 1, 1.0),
        1.0,
    )
    .unwrap();
    let (q, r) = (0.01, 1.0);
    let mut ks = KalmanState::new(
        DVector::zeros(1),
        DMatrix::from_element(1, 1, 1.0),
        DMatrix::from_element(1, 1, q),
        DMatrix::from_element(1, 1, r),
    );
    let u = DVector::zeros(1);
    let y = DVector::zeros(1);
    let mut prior = 0.0;
    for _ in 0..200 {
        ks = kalman_predict(&ks, &model, &u);
        prior = ks.p_cov[(0, 0)];
        ks = kalman_update(&ks, &model, &y).unwrap();
    }
    let closed = (q + (q * q + 4.0 * q * r).sqrt()) / 2.0;
    assert!((prior - closed).abs() < 1e-4);
    assert!((closed - 0.105125).abs() < 1e-6);
}

#[test]
fn servo_covariance_converges_to_riccati_fixed_point() {
    let model = PlantModel::default_servo();
    let (q_in, r) = (1e-3, 1e-4);
    let mut ks = KalmanState::for_plant(&model, q_in, r);
    let u = DVector::zeros(1);
    let y = DVector::zeros(1);
    for _ in 0..20_000 {
        ks = kalman_predict(&ks, &model, &u);
        ks = kalman_update(&ks, &model, &y).unwrap();
    }
    ks = kalman_predict(&ks, &model, &u);
    let a = [[model.a[(0, 0)], model.a[(0, 1)]], [model.a[(1, 0)], model.a[(1, 1)]]];
    let b = [model.b[(0, 0)], model.b[(1, 0)]];
    let q = [[b[0] * b[0] * q_in, b[0] * b[1] * q_in], [b[1] * b[0] * q_in, b[1] * b[1] * q_in]];
    let oracle = riccati_fixed_point(&a, &q, r);
    for i in 0..2 {
        for j in 0..2 {
            assert!((ks.p_cov[(i, j)] - oracle[i][j]).abs() < 1e-6, "({i},{j}) {} vs {}", ks.p_cov[(i, j)], oracle[i][j]);
        }
    }
}

#[test]
fn covariance_stays_positive_semidefinite() {
    let model = PlantModel::default_servo();
    let mut ks = KalmanState::for_plant(&model, 0.05, 0.01);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let noise = Normal::new(0.0, 1.0).unwrap();
    for _ in 0..10_000 {
        let u = DVector::from_element(1, noise.sample(&mut rng));
        ks = kalman_predict(&ks, &model, &u);
        let eig = ks.p_cov.clone().symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|&e| e >= -1e-12));
        ks = kalman_update(&ks, &model, &DVector::from_element(1, noise.sample(&mut rng))).unwrap();
        let eig = ks.p_cov.clone().symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|&e| e >= -1e-12));
        assert_eq!(ks.p_cov, ks.p_cov.transpose());
    }
}

#[test]
fn filter_beats_pseudo_inverse_of_measurement() {
    let model = PlantModel::default_servo();
    let (q_in, r): (f64, f64) = (0.5, 1e-3);
    let w = Normal::new(0.0, q_in.sqrt()).unwrap();
    let v = Normal::new(0.0, r.sqrt()).unwrap();
    let c_pinv = model.c.clone().pseudo_inverse(1e-12).unwrap();
    let (mut se_kf, mut se_raw) = (0.0, 0.0);
    for seed in 0..100 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = DVector::zeros(2);
        let mut ks = KalmanState::for_plant(&model, q_in, r);
        for i in 0..300 {
            let u = (i as f64 * 0.05).sin();
            let (next, y_true) = plant_step(&model, &x, u, w.sample(&mut rng)).unwrap();
            x = next;
            let y = DVector::from_element(1, y_true + v.sample(&mut rng));
            ks = kalman_predict(&ks, &model, &DVector::from_element(1, u));
            ks = kalman_update(&ks, &model, &y).unwrap();
            se_kf += (&ks.x_hat - &x).norm_squared();
            se_raw += (&c_pinv * &y - &x).norm_squared();
        }
    }
    assert!(se_kf <= se_raw, "{se_kf} vs {se_raw}");
}

#[test]
fn undelayed_plain_loop_settles() {
    let model = PlantModel::default_servo();
    let mut pi = PIController::new(DEFAULT_KP, DEFAULT_KI, model.ts, DEFAULT_CLAMP);
    let mut x = DVector::zeros(2);
    let mut y = 0.0;
    let mut last_outside = 0;
    for i in 0..3000 {
        let u = pi.control(1.0, y);
        let (next, out) = plant_step(&model, &x, u, 0.0).unwrap();
        x = next;
        y = out;
        if (1.0 - y).abs() >= 0.01 {
            last_outside = i;
        }
    }
    assert!(last_outside < 1500, "still outside the 1% band at period {last_outside}");
}
