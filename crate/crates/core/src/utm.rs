//! Transverse Mercator projection in the UTM layout.
//!
//! Kruger series on the WGS-84 ellipsoid, expanded to sixth order in the
//! third flattening. Truncation error is far below a millimeter anywhere
//! inside a standard 6-degree zone, so the projection contributes nothing
//! against GPS accuracy budgets.

use crate::error::{Error, Result};
use crate::num::Scalar;

const WGS84_A: f64 = 6_378_137.0;
const WGS84_F: f64 = 1.0 / 298.257_223_563;
const SCALE_K0: f64 = 0.9996;
const FALSE_EASTING: f64 = 500_000.0;
const FALSE_NORTHING_SOUTH: f64 = 10_000_000.0;

/// UTM zone selector; zone is configuration, never derived per point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UtmZone {
    pub zone: u8,
    pub north: bool,
}

impl UtmZone {
    pub fn new(zone: i32, north: bool) -> Result<Self> {
        if !(1..=60).contains(&zone) {
            return Err(Error::ZoneOutOfRange(zone));
        }
        Ok(UtmZone {
            zone: zone as u8,
            north,
        })
    }

    /// Central meridian of the zone, degrees east.
    pub fn central_meridian_deg(&self) -> f64 {
        f64::from(self.zone) * 6.0 - 183.0
    }
}

/// Series coefficients; depends only on the ellipsoid so values are
/// computed in `f64` and converted once.
struct Kruger<T> {
    radius: T,      // rectifying radius times k0
    e: T,           // first eccentricity
    e2: T,          // eccentricity squared
    alpha: [T; 6],  // forward series
    beta: [T; 6],   // inverse series
    false_easting: T,
    false_northing: T,
}

impl<T: Scalar> Kruger<T> {
    fn wgs84(north: bool) -> Self {
        let n = WGS84_F / (2.0 - WGS84_F);
        let n2 = n * n;
        let n3 = n2 * n;
        let n4 = n3 * n;
        let n5 = n4 * n;
        let n6 = n5 * n;

        let a_rect = WGS84_A / (1.0 + n) * (1.0 + n2 / 4.0 + n4 / 64.0 + n6 / 256.0);

        let alpha = [
            n / 2.0 - 2.0 / 3.0 * n2 + 5.0 / 16.0 * n3 + 41.0 / 180.0 * n4 - 127.0 / 288.0 * n5
                + 7891.0 / 37_800.0 * n6,
            13.0 / 48.0 * n2 - 3.0 / 5.0 * n3 + 557.0 / 1440.0 * n4 + 281.0 / 630.0 * n5
                - 1_983_433.0 / 1_935_360.0 * n6,
            61.0 / 240.0 * n3 - 103.0 / 140.0 * n4 + 15_061.0 / 26_880.0 * n5
                + 167_603.0 / 181_440.0 * n6,
            49_561.0 / 161_280.0 * n4 - 179.0 / 168.0 * n5 + 6_601_661.0 / 7_257_600.0 * n6,
            34_729.0 / 80_640.0 * n5 - 3_418_889.0 / 1_995_840.0 * n6,
            212_378_941.0 / 319_334_400.0 * n6,
        ];
        let beta = [
            n / 2.0 - 2.0 / 3.0 * n2 + 37.0 / 96.0 * n3 - 1.0 / 360.0 * n4 - 81.0 / 512.0 * n5
                + 96_199.0 / 604_800.0 * n6,
            n2 / 48.0 + n3 / 15.0 - 437.0 / 1440.0 * n4 + 46.0 / 105.0 * n5
                - 1_118_711.0 / 3_870_720.0 * n6,
            17.0 / 480.0 * n3 - 37.0 / 840.0 * n4 - 209.0 / 4480.0 * n5 + 5569.0 / 90_720.0 * n6,
            4397.0 / 161_280.0 * n4 - 11.0 / 504.0 * n5 - 830_251.0 / 7_257_600.0 * n6,
            4583.0 / 161_280.0 * n5 - 108_847.0 / 3_991_680.0 * n6,
            20_648_693.0 / 638_668_800.0 * n6,
        ];

        let e2 = WGS84_F * (2.0 - WGS84_F);
        Kruger {
            radius: T::of(SCALE_K0 * a_rect),
            e: T::of(e2.sqrt()),
            e2: T::of(e2),
            alpha: alpha.map(T::of),
            beta: beta.map(T::of),
            false_easting: T::of(FALSE_EASTING),
            false_northing: T::of(if north { 0.0 } else { FALSE_NORTHING_SOUTH }),
        }
    }

    fn tau_prime(&self, tau: T) -> T {
        let sigma = (self.e * (self.e * tau / (T::one() + tau * tau).sqrt()).atanh()).sinh();
        tau * (T::one() + sigma * sigma).sqrt() - sigma * (T::one() + tau * tau).sqrt()
    }
}

/// Forward projection of geodetic degrees to (easting, northing) meters.
pub fn project<T: Scalar>(lon_deg: T, lat_deg: T, zone: UtmZone) -> Result<(T, T)> {
    let lat_f64 = lat_deg.to_f64_lossy();
    if !(-84.0..=84.0).contains(&lat_f64) || !lat_f64.is_finite() {
        return Err(Error::LatitudeOutOfRange(lat_f64));
    }
    let k = Kruger::<T>::wgs84(zone.north);

    let phi = lat_deg.to_radians();
    let lam = (lon_deg - T::of(zone.central_meridian_deg())).to_radians();

    let tau = phi.tan();
    let tau_p = k.tau_prime(tau);

    let xi_p = tau_p.atan2(lam.cos());
    let eta_p = (lam.sin() / (tau_p * tau_p + lam.cos() * lam.cos()).sqrt()).asinh();

    let mut xi = xi_p;
    let mut eta = eta_p;
    for (j, &a) in k.alpha.iter().enumerate() {
        let two_j = T::of(2.0 * (j as f64 + 1.0));
        xi = xi + a * (two_j * xi_p).sin() * (two_j * eta_p).cosh();
        eta = eta + a * (two_j * xi_p).cos() * (two_j * eta_p).sinh();
    }

    let easting = k.false_easting + k.radius * eta;
    let northing = k.false_northing + k.radius * xi;
    Ok((easting, northing))
}

/// Inverse projection of (easting, northing) meters back to geodetic degrees.
pub fn unproject<T: Scalar>(easting: T, northing: T, zone: UtmZone) -> Result<(T, T)> {
    let k = Kruger::<T>::wgs84(zone.north);

    let xi = (northing - k.false_northing) / k.radius;
    let eta = (easting - k.false_easting) / k.radius;

    let mut xi_p = xi;
    let mut eta_p = eta;
    for (j, &b) in k.beta.iter().enumerate() {
        let two_j = T::of(2.0 * (j as f64 + 1.0));
        xi_p = xi_p - b * (two_j * xi).sin() * (two_j * eta).cosh();
        eta_p = eta_p - b * (two_j * xi).cos() * (two_j * eta).sinh();
    }

    let tau_p = xi_p.sin() / (eta_p.sinh() * eta_p.sinh() + xi_p.cos() * xi_p.cos()).sqrt();

    // Newton inversion of tau' (converges in a handful of steps).
    let one = T::one();
    let mut tau = tau_p / (one - k.e2).sqrt();
    for _ in 0..8 {
        let f = k.tau_prime(tau) - tau_p;
        let sigma = (k.e * (k.e * tau / (one + tau * tau).sqrt()).atanh()).sinh();
        let df = ((one + sigma * sigma) * (one + tau * tau)).sqrt() - sigma * tau;
        let df = df * (one - k.e2) * (one + tau * tau).sqrt() / (one + (one - k.e2) * tau * tau);
        let step = f / df;
        tau = tau - step;
        if step.abs() < T::of(1e-16) * tau.abs().max(one) {
            break;
        }
    }

    let lat = tau.atan().to_degrees();
    let lon = T::of(zone.central_meridian_deg()) + eta_p.sinh().atan2(xi_p.cos()).to_degrees();
    let lat_f64 = lat.to_f64_lossy();
    if !(-84.0..=84.0).contains(&lat_f64) {
        return Err(Error::LatitudeOutOfRange(lat_f64));
    }
    Ok((lon, lat))
}
