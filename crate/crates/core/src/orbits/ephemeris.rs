//! Low-precision analytic Sun and Moon positions (equatorial, km).
//!
//! Accuracy is of order 0.01 deg for the Sun and a few arcminutes for the
//! Moon, ample for third-body and radiation-pressure perturbations.

use nalgebra::Vector3;

use super::{AU_KM, SECONDS_PER_DAY};

const OBLIQUITY_J2000_DEG: f64 = 23.439_291_11;

fn ecliptic_to_equatorial(lon: f64, lat: f64, r: f64, obliquity: f64) -> Vector3<f64> {
    let (sl, cl) = lon.sin_cos();
    let (sb, cb) = lat.sin_cos();
    let (se, ce) = obliquity.sin_cos();
    let x = r * cb * cl;
    let y = r * cb * sl;
    let z = r * sb;
    Vector3::new(x, ce * y - se * z, se * y + ce * z)
}

pub fn sun_position(epoch: f64) -> Vector3<f64> {
    let d = epoch / SECONDS_PER_DAY;
    let mean_lon = (280.460 + 0.985_647_4 * d).to_radians();
    let g = (357.528 + 0.985_600_3 * d).to_radians();
    let lambda = mean_lon + (1.915f64.to_radians()) * g.sin() + (0.020f64.to_radians()) * (2.0 * g).sin();
    let r = (1.000_14 - 0.016_71 * g.cos() - 0.000_14 * (2.0 * g).cos()) * AU_KM;
    let eps = (23.439 - 0.000_000_4 * d).to_radians();
    ecliptic_to_equatorial(lambda, 0.0, r, eps)
}

pub fn moon_position(epoch: f64) -> Vector3<f64> {
    let t = epoch / (SECONDS_PER_DAY * 36_525.0);
    let deg = |x: f64| x.to_radians();
    let arcsec = |x: f64| (x / 3600.0).to_radians();
    let l0 = deg(218.316_17 + 481_267.880_88 * t - 1.3972 * t);
    let l = deg(134.962_92 + 477_198.867_53 * t);
    let lp = deg(357.525_43 + 35_999.049_44 * t);
    let f = deg(93.272_83 + 483_202.018_73 * t);
    let d = deg(297.850_27 + 445_267.111_35 * t);

    let lon = l0
        + arcsec(
            22_640.0 * l.sin() + 769.0 * (2.0 * l).sin() - 4586.0 * (l - 2.0 * d).sin()
                + 2370.0 * (2.0 * d).sin()
                - 668.0 * lp.sin()
                - 412.0 * (2.0 * f).sin()
                - 212.0 * (2.0 * l - 2.0 * d).sin()
                - 206.0 * (l + lp - 2.0 * d).sin()
                + 192.0 * (l + 2.0 * d).sin()
                - 165.0 * (lp - 2.0 * d).sin()
                + 148.0 * (l - lp).sin()
                - 125.0 * d.sin()
                - 110.0 * (l + lp).sin()
                - 55.0 * (2.0 * f - 2.0 * d).sin(),
        );
    let lat = arcsec(
        18_520.0 * (f + lon - l0 + arcsec(412.0 * (2.0 * f).sin() + 541.0 * lp.sin())).sin()
            - 526.0 * (f - 2.0 * d).sin()
            + 44.0 * (l + f - 2.0 * d).sin()
            - 31.0 * (-l + f - 2.0 * d).sin()
            - 25.0 * (-2.0 * l + f).sin()
            - 23.0 * (lp + f - 2.0 * d).sin()
            + 21.0 * (-l + f).sin()
            + 11.0 * (-lp + f - 2.0 * d).sin(),
    );
    let r = 385_000.0 - 20_905.0 * l.cos() - 3699.0 * (2.0 * d - l).cos() - 2956.0 * (2.0 * d).cos()
        - 570.0 * (2.0 * l).cos()
        + 246.0 * (2.0 * l - 2.0 * d).cos()
        - 205.0 * (lp - 2.0 * d).cos()
        - 171.0 * (l + 2.0 * d).cos()
        - 152.0 * (l + lp - 2.0 * d).cos();
    ecliptic_to_equatorial(lon, lat, r, OBLIQUITY_J2000_DEG.to_radians())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sun_distance_and_season() {
        // ~2000-03-20 (March equinox): Sun near the vernal equinox direction
        let s = sun_position(79.3 * SECONDS_PER_DAY);
        assert!((s.norm() / AU_KM - 1.0).abs() < 0.02);
        assert!(s.z.abs() / s.norm() < 0.01);
        assert!(s.x > 0.0);
        // ~2000-06-21: declination near +23.4 deg
        let s = sun_position(172.0 * SECONDS_PER_DAY);
        let dec = (s.z / s.norm()).asin().to_degrees();
        assert!((dec - 23.4).abs() < 0.3, "{dec}");
    }

    #[test]
    fn moon_distance_and_declination_bounds() {
        for i in 0..400 {
            let m = moon_position(i as f64 * 0.7 * SECONDS_PER_DAY);
            assert!(m.norm() > 350_000.0 && m.norm() < 410_000.0);
            let dec = (m.z / m.norm()).asin().to_degrees();
            assert!(dec.abs() < 29.0);
        }
    }
}
