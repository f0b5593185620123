"""
Configuration file for the latent memory adapter system
"""
import os
from pathlib import Path

# Application metadata
APP_NAME = "Latent Memory Adapters"
APP_VERSION = "1.0.0"

# Paths
BASE_DIR = Path(__file__).parent.parent
DATA_DIR = Path(os.environ.get("LATENT_MEMORY_DATA", BASE_DIR / "data"))
LOGS_DIR = Path(os.environ.get("LATENT_MEMORY_LOGS", BASE_DIR / "logs"))
RUNS_DIR = BASE_DIR / "runs"

# Create necessary directories
DATA_DIR.mkdir(exist_ok=True)
LOGS_DIR.mkdir(exist_ok=True)

# Run registry database (lives in the runs root)
REGISTRY_FILENAME = "registry.db"


def registry_url(runs_dir=RUNS_DIR):
    return f"sqlite:///{Path(runs_dir) / REGISTRY_FILENAME}"


REGISTRY_URL = registry_url()


# Run directory filenames
MANIFEST_FILE = "manifest.json"
ADAPTER_FILE = "adapter.ckpt"
TRAIN_LOG_FILE = "train_log.jsonl"
RESULTS_FILE = "results.jsonl"
SUMMARY_FILE = "summary.json"
BUCKET_CSV_FILE = "curve_buckets.csv"
KNOWLEDGE_CSV_FILE = "curve_knowledge.csv"
BACKBONE_FILE = "backbone.ckpt"
CORPUS_FILE = "corpus.json"

# Backbone defaults (desk scale)
BACKBONE_LAYERS = 4
BACKBONE_D_MODEL = 128
BACKBONE_HEADS = 4
BACKBONE_VOCAB = 512
BACKBONE_CONTEXT = 256
BACKBONE_MLP_RATIO = 4
INIT_STD = 0.02
LAYER_NORM_EPS = 1e-5

# Pretraining defaults
PRETRAIN_STEPS = 2000
PRETRAIN_LR = 3e-3
PRETRAIN_WARMUP = 100
PRETRAIN_SEQUENCES = 4000
PRETRAIN_HELD_OUT = 200
PRETRAIN_BATCH = 8

# Memory methods and capacity conditions
MEMORY_METHODS = ["baseline", "m1", "m2", "m3", "m4", "m5", "m6"]
CAPACITY_CONDITIONS = ["1x", "10x"]
CAPACITY_DIMS = {
    "1x": {"n_p": 64, "d_h": 256, "slots": 64, "top_k": 8},
    "10x": {"n_p": 640, "d_h": 810, "slots": 640, "top_k": 80},
}
WRITE_DECAY = 0.95
GATE_BIAS_INIT = -2.0

# Type-1 training defaults
LEARNING_RATE = 1e-4
WEIGHT_DECAY = 1e-2
WARMUP_STEPS = 200
GRAD_CLIP = 1.0
EPOCHS = 10
BATCH_SIZE = 4
GRAD_ACCUMULATION = 4
WINDOW_TURNS = 8
PATIENCE = 3
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
VALIDATION_FRACTION = 0.1

# Evaluation
LAG_BUCKET_EDGES = [0, 32, 64, 128, 256]
MAX_ANSWER_TOKENS = 4

# Benchmark defaults
BENCH_DIALOGUES = 20
BENCH_SESSIONS = 30
BENCH_TURNS_PER_SESSION = 12
BENCH_ENTITIES = 40
BENCH_ATTRIBUTES = 8
BENCH_DISTRACTOR_RATE = 0.5
BENCH_OVERWRITE_RATE = 0.1
BENCH_QUESTIONS_PER_BUCKET = 2
CORPUS_SCHEMA_VERSION = 1
SESSION_START_DATE = "2023-01-02"
SESSION_SPACING_DAYS = 3

# Tokenizer reserved tokens
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"
EOA_TOKEN = "<eoa>"
QUESTION_TOKEN = "<q>"
RESERVED_TOKENS = [PAD_TOKEN, UNK_TOKEN, EOA_TOKEN, QUESTION_TOKEN]

# Synthetic lexicon
SPEAKERS = ["anna", "ben", "cara", "dev"]

ENTITY_NAMES = [
    "oliver", "mia", "lucas", "emma", "noah", "ava", "liam", "zoe",
    "ethan", "lily", "mason", "ella", "logan", "nora", "elijah", "ruby",
    "aiden", "ivy", "caleb", "hazel", "owen", "iris", "henry", "luna",
    "jack", "stella", "leo", "violet", "isaac", "aurora", "felix", "clara",
    "hugo", "maya", "oscar", "alice", "theo", "rosa", "milo", "sofia",
]

ATTRIBUTE_VALUES = {
    "job": ["doctor", "librarian", "pilot", "chef", "nurse", "lawyer", "florist", "painter",
            "engineer", "baker", "dentist", "writer", "plumber", "singer", "banker", "tailor"],
    "city": ["paris", "tokyo", "cairo", "lima", "oslo", "rome", "delhi", "berlin",
             "new york", "sydney", "madrid", "dublin", "nairobi", "seoul", "quito", "vienna"],
    "pet": ["dog", "cat", "parrot", "rabbit", "hamster", "turtle", "goldfish", "lizard",
            "pony", "ferret", "snake", "canary", "mouse", "frog", "goat", "duck"],
    "color": ["red", "blue", "green", "yellow", "purple", "orange", "black", "white",
              "light blue", "dark green", "pink", "brown", "grey", "gold", "silver", "teal"],
    "food": ["pizza", "sushi", "tacos", "pasta", "curry", "salad", "soup", "rice",
             "noodles", "steak", "dumplings", "pancakes", "burgers", "falafel", "paella", "ramen"],
    "sport": ["tennis", "soccer", "chess", "rugby", "golf", "hockey", "boxing", "rowing",
              "table tennis", "cycling", "karate", "skiing", "surfing", "fencing", "archery", "judo"],
    "car": ["volvo", "toyota", "honda", "fiat", "tesla", "ford", "audi", "mazda",
            "kia", "jeep", "saab", "lada", "skoda", "opel", "seat", "mini"],
    "hobby": ["knitting", "hiking", "gardening", "fishing", "drawing", "dancing", "baking", "reading",
              "bird watching", "pottery", "camping", "juggling", "origami", "sailing", "climbing", "singing"],
}
ATTRIBUTES = list(ATTRIBUTE_VALUES)

DISTRACTOR_TEMPLATES = [
    "i think the weather is {adj} today",
    "did you see the {adj} movie last night",
    "my week was {adj} and long",
    "the train was {adj} this morning",
    "we should meet for coffee soon",
    "that sounds {adj} to me",
    "i am reading a {adj} book",
    "the park looked {adj} yesterday",
    "how was your weekend",
    "i need to call my friend later",
]
DISTRACTOR_ADJECTIVES = [
    "nice", "strange", "busy", "quiet", "cold", "warm", "funny", "boring", "great", "odd",
]

FACT_TEMPLATE = "{entity} {attribute} is {value}"
QUESTION_TEMPLATE = "what is {entity} {attribute} ?"

# Logging
LOG_LEVEL = os.environ.get("LATENT_MEMORY_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
