SIMULATION_CONFIG = {
    # Network and radio parameters
    'scenario': {
        'name': 'desk_k2',
        'seed': 2024,
        'num_aps': 16,
        'num_locations': 2,
        'ris_elements': 64,
        'area_half_width_km': 1.0,
        'carrier_frequency_ghz': 1.9,
        'bandwidth_hz': 20e6,
        'slot_duration_s': 0.01,
        'noise_figure_db': 9.0,
        'noise_power_dbm': -230.0,  # Calibrated floor for the RIS-only link; None or "thermal" = thermal noise over the bandwidth plus noise figure
        'noise_power_w': None,  # Linear override, wins over noise_power_dbm
        'transmit_power_dbm': 20.0,
    },

    # Where things are. Coordinates in km, origin at the area center
    'geometry': {
        'ap_layout': 'uniform_subregion',  # or 'explicit'
        'ap_subregion': [[-1.0, -1.0], [-0.75, -0.75]],
        'ap_positions': None,
        'ris_position': [0.0, 0.0],
        'location_layout': 'explicit',  # or 'grid'
        'location_subregion': [[0.05, 0.05], [1.0, 1.0]],
        'location_positions': [[0.25, 0.25], [0.75, 0.75]],
    },

    # Three-slope large-scale fading
    'pathloss': {
        'ap_height_m': 15.0,
        'user_height_m': 1.65,
        'd0_km': 0.01,
        'd1_km': 0.05,
        'shadow_std_db': 0.0,  # 0 = no shadowing
    },

    # Spatial correlation at the RIS; rho given as [real, imag]
    'correlation': {
        'kind': 'exponential',  # 'exponential', 'isotropic' or 'identity'
        'rho_t': [0.6, 0.0],
        'rho_r': [0.4, 0.2],
        'spacing_wavelengths': 0.5,
    },

    # Flow-level traffic
    'traffic': {
        'arrival_rates': [0.1, 0.1],  # flows per slot, scalar or one per location
        'mean_file_size_bits': 1e6,
    },

    # Phase-shift design
    'phase': {
        'mode': 'continuous',  # 'continuous', 'discrete', 'equal' or 'random'
        'levels': 4,
        'n_rand': 1000,
        'tol': 1e-8,
        'max_iter': 5000,
        'rank': None,  # None = ceil(sqrt(2M)) + 1
        'retries': 3,
    },

    # Flow simulation
    'simulation': {
        'policy': 'optimized',  # 'optimized', 'random', 'tdma' or 'equal'
        'slots': 20000,
        'window': 500,
        'record_every': 1,
        'all_active_transmit': False,
        'trend_fraction': 0.25,
        'trend_z': 1.645,
    },

    # Stability region estimation
    'region': {
        'policies': ['optimized', 'tdma'],
        'rays': None,  # None = evenly spaced angles for K = 2, the equal-rate diagonal otherwise
        'slots': 5000,
        'window': 250,
        'threshold': 1e-3,
        'trend_fraction': 0.5,
        'tol': 0.02,
        'scale_max': None,  # None = 1.5x the smallest interference-free rate along the ray
        'workers': 1,
    },

    # Stability metric against load, one curve per policy
    'sweep': {
        'policies': ['optimized', 'random'],
        'direction': None,  # None = equal arrival rates
        'points': 10,
        'scale_max': None,  # None = 1.5x the smallest interference-free rate along the direction
        'slots': 4000,
        'window': 250,
        'threshold': 1e-3,
        'trend_fraction': 0.5,
    },

    # Fluid limit and Lyapunov drift
    'fluid': {
        'policy': 'optimized',
        'dt': 1e-3,
        'horizon': None,  # None = 10x the single-location drain time
        'gamma': None,  # None = certified accuracy of the phase solution
        'epsilon': None,  # None = chosen from the fluid boundary along lambda
        'initial': None,  # None = uniform split of unit mass
        'max_steps': 1_000_000,  # Euler step budget; larger runs fail with a numeric error
    },

    # Oracle suite
    'validate': {
        'budget': 'full',  # or 'reduced'
        'samples': 10000,
        'trials': 100,
        'queue_slots': 200000,
    },
}

# Named profiles, merged on top of SIMULATION_CONFIG
PROFILES = {
    'desk': {},
    'paper': {
        # Long-running: hours on a workstation
        'scenario': {
            'name': 'paper_k400',
            'num_aps': 128,
            'num_locations': 400,
            'ris_elements': 1600,
        },
        'geometry': {
            'location_layout': 'grid',
            'location_positions': None,
        },
        'traffic': {
            'arrival_rates': 0.1,
        },
        'simulation': {
            'slots': 10000,
            'record_every': 10,
        },
        'region': {
            'policies': ['optimized', 'random'],
        },
    },
}
