import os
from dotenv import load_dotenv

load_dotenv()

class Config:
    # Storage
    STORAGE_DIR = os.environ.get('STORAGE_DIR', 'storage')

    # Logging
    LOG_LEVEL = os.environ.get('LOG_LEVEL', 'INFO').upper()
    LOG_FILE = os.environ.get('LOG_FILE', os.path.join(STORAGE_DIR, 'logs', 'rdm-ood.log'))
    ENABLE_PROGRESS = os.environ.get('ENABLE_PROGRESS', 'true').lower() == 'true'

    # Compute
    NUM_THREADS = int(os.environ.get('RDM_NUM_THREADS', 1))  # 1 = deterministic mode

    # Likelihood evaluation
    LIKELIHOOD_CHUNK = int(os.environ.get('RDM_LIKELIHOOD_CHUNK', 256))
    MAX_SOLVER_STEPS = int(os.environ.get('RDM_MAX_SOLVER_STEPS', 100000))
