/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Great-circle distance between two (latitude, longitude) points in degrees.
pub fn haversine_km(a: (f64, f64), b: (f64, f64)) -> f64 {
    let (lat1, lon1) = (a.0.to_radians(), a.1.to_radians());
    let (lat2, lon2) = (b.0.to_radians(), b.1.to_radians());
    let dlat = lat2 - lat1;
    let dlon = lon2 - lon1;
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

/// Moves `origin` by `north_km` / `east_km` using a local flat-earth
/// approximation (adequate at city scale).
pub fn offset_km(origin: (f64, f64), north_km: f64, east_km: f64) -> (f64, f64) {
    let km_per_deg_lat = EARTH_RADIUS_KM.to_radians();
    let km_per_deg_lon = km_per_deg_lat * origin.0.to_radians().cos();
    (
        origin.0 + north_km / km_per_deg_lat,
        origin.1 + east_km / km_per_deg_lon,
    )
}
