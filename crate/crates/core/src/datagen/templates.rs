/// Response template for one monitoring channel.
///
/// A channel reads `baseline + amplitude · (1 − exp(−max(t − delay, 0) / τ))`
/// with `τ = time_constant_ref · 35.5 / size_cm`. An infinite delay means the
/// channel does not respond to breaks at that location.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChannelTemplate {
    pub name: &'static str,
    pub baseline: f64,
    pub amplitude_cold: f64,
    pub amplitude_hot: f64,
    pub delay_cold: f64,
    pub delay_hot: f64,
    pub time_constant_ref: f64,
    pub noise_floor: f64,
}

impl ChannelTemplate {
    pub fn distinguishes_location(&self) -> bool {
        self.amplitude_cold != self.amplitude_hot || self.delay_cold != self.delay_hot
    }
}

/// Bumped whenever [`TEMPLATES`] changes; recorded in dataset manifests.
pub const TEMPLATE_VERSION: u32 = 2;

pub const CHANNELS: usize = 38;

const INF: f64 = f64::INFINITY;

const fn ch(
    name: &'static str,
    baseline: f64,
    amplitude_cold: f64,
    amplitude_hot: f64,
    delay_cold: f64,
    delay_hot: f64,
    time_constant_ref: f64,
    noise_floor: f64,
) -> ChannelTemplate {
    ChannelTemplate {
        name,
        baseline,
        amplitude_cold,
        amplitude_hot,
        delay_cold,
        delay_hot,
        time_constant_ref,
        noise_floor,
    }
}

// name, baseline, A_cold, A_hot, delay_cold [s], delay_hot [s], tau_ref [s], noise
pub const TEMPLATES: [ChannelTemplate; CHANNELS] = [
    ch("cold_leg_break_discharge_kgs", 0.0, 900.0, 900.0, 0.0, INF, 3.0, 2.0),
    ch("hot_leg_break_discharge_kgs", 0.0, 700.0, 700.0, INF, 0.0, 3.0, 2.0),
    ch("pzr_pressure_mpa", 15.5, -9.0, -9.0, 0.0, 0.0, 3.0, 0.01),
    ch("pzr_level_pct", 55.0, -50.0, -50.0, 0.5, 0.5, 4.0, 0.1),
    ch("pzr_temperature_c", 345.0, -60.0, -60.0, 1.0, 1.0, 6.0, 0.2),
    ch("pv_water_level_pct", 100.0, -45.0, -38.0, 2.0, 3.0, 8.0, 0.1),
    ch("core_outlet_temp_c", 327.0, -25.0, -25.0, 1.0, 1.0, 5.0, 0.05),
    ch("core_inlet_temp_c", 291.0, -15.0, -15.0, 1.5, 1.5, 5.0, 0.05),
    ch("hot_leg_level_pct", 100.0, -35.0, -55.0, 3.0, 1.0, 6.0, 0.1),
    ch("cold_leg_level_pct", 100.0, -55.0, -35.0, 1.0, 3.0, 6.0, 0.1),
    ch("hot_leg_temp_c", 327.0, -30.0, -36.0, 1.0, 0.5, 5.0, 0.05),
    ch("cold_leg_temp_c", 291.0, -20.0, -16.0, 0.5, 1.0, 5.0, 0.05),
    ch("hot_leg_flow_kgs", 4900.0, -2600.0, -3200.0, 0.5, 0.2, 2.5, 5.0),
    ch("cold_leg_flow_kgs", 4900.0, -3200.0, -2600.0, 0.2, 0.5, 2.5, 5.0),
    ch("rcp_speed_rpm", 1485.0, -300.0, -300.0, 5.0, 5.0, 10.0, 1.0),
    ch("sg_pressure_mpa", 6.9, 1.2, 1.2, 2.0, 2.0, 7.0, 0.005),
    ch("sg_level_pct", 50.0, -12.0, -12.0, 3.0, 3.0, 9.0, 0.05),
    ch("sg_feedwater_flow_kgs", 540.0, -400.0, -400.0, 4.0, 4.0, 3.0, 1.0),
    ch("sg_steam_flow_kgs", 540.0, -480.0, -480.0, 2.0, 2.0, 2.0, 1.0),
    ch("containment_pressure_kpa", 101.0, 220.0, 190.0, 0.0, 0.5, 4.0, 0.5),
    ch("containment_temp_c", 45.0, 85.0, 72.0, 0.5, 1.0, 6.0, 0.2),
    ch("containment_humidity_pct", 40.0, 55.0, 55.0, 1.0, 1.0, 5.0, 0.2),
    ch("sump_level_m", 0.2, 3.0, 3.0, 5.0, 5.0, 12.0, 0.01),
    ch("hpsi_flow_kgs", 0.0, 60.0, 60.0, 8.0, 8.0, 4.0, 0.2),
    ch("lpsi_flow_kgs", 0.0, 300.0, 300.0, 20.0, 20.0, 6.0, 1.0),
    ch("accumulator_pressure_mpa", 4.5, -2.5, -2.5, 12.0, 12.0, 8.0, 0.01),
    ch("accumulator_level_pct", 80.0, -60.0, -50.0, 12.0, 14.0, 8.0, 0.2),
    ch("neutron_flux_pct", 100.0, -98.0, -98.0, 1.5, 1.5, 1.0, 0.2),
    ch("reactor_power_mw", 3050.0, -2950.0, -2950.0, 1.5, 1.5, 1.5, 5.0),
    ch("core_dp_kpa", 300.0, -200.0, -200.0, 0.5, 0.5, 3.0, 0.5),
    ch("pzr_surge_flow_kgs", 0.0, -150.0, -150.0, 0.5, 0.5, 2.0, 0.5),
    ch("charging_flow_kgs", 8.0, 20.0, 20.0, 3.0, 3.0, 5.0, 0.05),
    ch("letdown_flow_kgs", 8.0, -8.0, -8.0, 2.0, 2.0, 1.0, 0.05),
    ch("cladding_temp_c", 340.0, 240.0, 210.0, 10.0, 14.0, 15.0, 0.5),
    ch("fuel_centerline_temp_c", 1200.0, -500.0, -500.0, 1.5, 1.5, 4.0, 2.0),
    ch("upper_plenum_void_frac", 0.0, 0.6, 0.75, 4.0, 2.0, 8.0, 0.002),
    ch("downcomer_void_frac", 0.0, 0.7, 0.55, 2.0, 4.0, 8.0, 0.002),
    ch("loop_dp_kpa", 110.0, -80.0, -80.0, 1.0, 1.0, 3.0, 0.2),
];

pub fn channel_names() -> Vec<&'static str> {
    TEMPLATES.iter().map(|t| t.name).collect()
}
