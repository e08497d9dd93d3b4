use rand::Rng;

/// Box-Muller normal draw with mean 0.
pub fn normal<R: Rng>(rng: &mut R, std: f64) -> f64 {
    let u1: f64 = 1.0 - rng.gen::<f64>();
    let u2: f64 = rng.gen::<f64>();
    std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}
