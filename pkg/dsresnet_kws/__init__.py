VERSION = '0.1.0'

KEYWORDS = ['yes', 'no', 'up', 'down', 'left', 'right', 'on', 'off', 'stop', 'go']
SILENCE_LABEL = '_silence_'
UNKNOWN_LABEL = '_unknown_'
SILENCE_INDEX = 0
UNKNOWN_INDEX = 1

DEFAULT_LOGGING = {
    'version': 1,
    'disable_existing_loggers': False,
    'formatters': {
        'simple': {
            'format': '%(asctime)s %(levelname)s %(name)s: %(message)s',
        },
    },
    'handlers': {
        'console': {
            'level': 'DEBUG',
            'class': 'logging.StreamHandler',
            'formatter': 'simple',
            'stream': 'ext://sys.stderr',
        },
    },
    'loggers': {
        'dsresnet_kws': {
            'handlers': ['console'],
            'level': 'INFO',
            'propagate': False,
        },
    },
}

DEFAULT_KWS_SETTINGS = {
    'seed': 0,

    # optimisation
    'batch_size': 100,
    'total_steps': 30000,
    'momentum': 0.9,
    'weight_decay': 1e-3,
    'lr_initial': 0.1,
    'lr_decay': 0.1,
    'lr_decay_every': 10000,
    'eval_every': 1000,
    'early_stop_accuracy': None,

    # front end
    'sample_rate': 16000,
    'clip_samples': 16000,
    'window_ms': 25,
    'shift_ms': 10,
    'n_fft': 512,
    'n_mels': 40,
    'n_mfcc': 40,
    'fmin': 20.0,
    'fmax': 8000.0,
    'log_floor': 1e-10,

    # corpus
    'keywords': list(KEYWORDS),
    'validation_percentage': 10,
    'testing_percentage': 10,
    'silence_percentage': 10,
    'unknown_percentage': 10,

    # augmentation
    'time_shift_ms': 100,
    'background_frequency': 0.8,
    'background_volume': 0.1,

    # network
    'normalization': False,

    'logging': DEFAULT_LOGGING,
}

CLASS_LABELS = [SILENCE_LABEL, UNKNOWN_LABEL] + list(KEYWORDS)
