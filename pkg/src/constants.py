"""
Constantes utilisées dans le projet ECRF (champs de radiance tensoriels
compressés par entropie).
"""

# Formats binaires
CHECKPOINT_MAGIC = b"ECKP"
CHECKPOINT_VERSION = 1
BITSTREAM_MAGIC = b"ECRF"
BITSTREAM_VERSION = 1

# Composantes de la grille, dans l'ordre déclaré (sérialisation, codage)
GRID_KINDS = ("density", "appearance")
PLANE_NAMES = ("yz", "xz", "xy")
LINE_NAMES = ("x", "y", "z")
# Axes spatiaux couverts par chaque plan, et axe de la ligne associée
PLANE_AXES = {"yz": (1, 2), "xz": (0, 2), "xy": (0, 1)}
LINE_AXIS = {"x": 0, "y": 1, "z": 2}
PLANE_FOR_LINE = {"x": "yz", "y": "xz", "z": "xy"}


def component_names():
    """Noms des composantes dans l'ordre déclaré."""
    names = []
    for kind in GRID_KINDS:
        names.extend(f"{kind}_plane_{p}" for p in PLANE_NAMES)
        names.extend(f"{kind}_line_{l}" for l in LINE_NAMES)
    return names


COMPONENT_NAMES = tuple(component_names())

# Grille
DEFAULT_RESOLUTION = (64, 64, 64)
DEFAULT_RANK = 1
DEFAULT_CHANNELS = 16
DEFAULT_INIT_SCALE = 0.1
DEFAULT_COEFF_STEP = 1.0
DEFAULT_BOUNDING_BOX = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))

# Transformée
MATRIX_BLOCK_DEFAULT = (16, 16, 16)
VECTOR_BLOCK_DEFAULT = (8, 8)
# Configurations de blocs étudiées pour les matrices
ABLATION_MATRIX_BLOCKS = (
    (1, 8, 8),
    (1, 16, 16),
    (1, 32, 32),
    (4, 4, 4),
    (8, 8, 8),
    (16, 16, 16),
)
RATE_DOMAINS = ("frequency", "spatial")

# Modèle d'entropie
CDF_STAGES = 4
CDF_INIT_SCALE = 10.0
PMF_FLOOR = 1e-9
TABLE_PRECISION = 16

# Quantification
SYMBOL_MIN = -127
SYMBOL_MAX = 127

# Rendu
DEFAULT_N_SAMPLES = 128
ORACLE_SAMPLE_FACTOR = 4
DEFAULT_BACKGROUND = (1.0, 1.0, 1.0)
DEFAULT_DENSITY_BIAS = -10.0
MLP_HIDDEN = 64
DIRECTION_FREQUENCIES = 2
PSNR_CAP = 99.0

# Entraînement
DEFAULT_ITERATIONS = 5000
ENTROPY_START_FRACTION = 16000 / 30000
DEFAULT_BATCH_SIZE = 1024
LR_GRID = 2e-2
LR_MLP = 1e-3
LR_ENTROPY = 1e-2
ADAM_BETAS = (0.9, 0.99)
GRADCHECK_STEP = 1e-3
GRADCHECK_FLOOR = 1e-6

# Balayage débit-distorsion : λ_e par défaut et rapports λ_e·bits / MSE de la calibration
DEFAULT_SWEEP_LAMBDAS = (2e-11, 2e-10, 2e-9)
DEFAULT_SWEEP_ALPHAS = (1.0,)
CALIBRATION_RATIOS = (0.01, 0.1, 1.0)

# Colonnes des fichiers CSV
TRAIN_LOG_COLUMNS = ["iteration", "mse", "rate_bits", "reg", "psnr", "seconds"]
EVAL_COLUMNS = ["view", "psnr"]
# Colonnes de rd_sweep.csv, puis colonnes supplémentaires de rd_sweep_runs.csv
SWEEP_COLUMNS = ["lambda_e", "alpha", "size_bytes", "psnr", "rate_bits", "saturation"]
SWEEP_RUN_COLUMNS = SWEEP_COLUMNS + [
    "blocks",
    "domain",
    "raw_8bit_bytes",
    "payload_bytes",
    "psnr_float",
    "status",
]
SIZE_REPORT_COLUMNS = ["stage", "size_bytes", "psnr"]
GRADCHECK_COLUMNS = ["family", "samples", "max_rel_error"]

# Environnement et fichiers
OUTPUT_ROOT_ENV = "ECRF_OUTPUT_ROOT"
DEFAULT_OUTPUT_ROOT = "runs"
CHECKPOINT_NAME = "model.ckpt"
BITSTREAM_NAME = "model.ecrf"
RUN_CONFIG_NAME = "run_config.json"
TRAIN_LOG_NAME = "train_log.csv"
EVAL_NAME = "eval.csv"

# Codes de sortie
EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2
EXIT_BITSTREAM = 3
EXIT_CHECKPOINT = 4

# Messages d'erreur
ERR_RESOLUTION_MIN = "La résolution {} vaut {}, elle doit être au moins 2"
ERR_NOT_POSITIVE = "Le champ {} doit être strictement positif (reçu {})"
ERR_NOT_MULTIPLE = "{} vaut {}, ce n'est pas un multiple du bloc DCT {}"
ERR_BLOCK_DIMS = "Dimensions de bloc invalides : {}"
ERR_BOUNDING_BOX = "Boîte englobante invalide : {}"
ERR_AXIS_NOT_MULTIPLE = "L'axe {} de longueur {} n'est pas un multiple du bloc {}"
ERR_BLOCK_RANK = "Le bloc {} ne correspond pas au tenseur de dimension {}"
ERR_POINT_OUTSIDE = "Point hors de la boîte englobante : {}"
ERR_PIXEL_OUTSIDE = "Pixel hors de l'image : {}"
ERR_SHAPE_MISMATCH = "Formes incompatibles : {} et {}"
ERR_CAMERA = "Caméra invalide : {}"
ERR_SURROGATE_MODE = "Mode de quantification inconnu : {}"
ERR_CHANNEL_MISMATCH = "Le modèle d'entropie ne couvre pas la composante {} ({} canaux attendus, {} reçus)"
ERR_TABLE_OVERFLOW = "Support trop large pour la précision : {} symboles pour {} fréquences"
ERR_SYMBOL_OUTSIDE = "Symbole {} hors du support [{}, {}]"
ERR_LOSS_CONFIG = "Configuration de perte invalide : {}"
ERR_NON_FINITE = "Terme de perte non fini : {} = {}"
ERR_BAD_MAGIC = "Signature invalide : {!r} (attendu {!r})"
ERR_BAD_VERSION = "Version de format non supportée : {}"
ERR_CHECKSUM = "Somme de contrôle invalide : {:08x} (attendu {:08x})"
ERR_TRUNCATED = "Flux tronqué : {} octets attendus à la position {}, {} disponibles"
ERR_VARINT = "Entier variable trop long à la position {}"
ERR_CORRUPT_PAYLOAD = "Charge utile corrompue : {}"
ERR_CHECKPOINT = "Point de contrôle invalide : {}"
ERR_SCENE_NOT_FOUND = "Scène introuvable : {}"
ERR_RUN_CONFIG = "Configuration d'exécution invalide : {}"
ERR_CALIBRATION = "Calibration de λ_e impossible : {}"
