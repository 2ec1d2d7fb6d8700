# Constants for the medsearch retrieval engine

# Vocabulary special tokens (ids are fixed)
CLS_TOKEN = '[CLS]'
SEP_TOKEN = '[SEP]'
PAD_TOKEN = '[PAD]'
UNK_TOKEN = '[UNK]'
SPECIAL_TOKENS = (CLS_TOKEN, SEP_TOKEN, PAD_TOKEN, UNK_TOKEN)
CLS_ID = 0
SEP_ID = 1
PAD_ID = 2
UNK_ID = 3

# Encoder (desk scale)
DEFAULT_HIDDEN_SIZE = 64
DEFAULT_NUM_LAYERS = 2
DEFAULT_NUM_HEADS = 4
DEFAULT_FFN_SIZE = 128
DEFAULT_VOCAB_SIZE = 8000
DEFAULT_MAX_QUERY_LENGTH = 32
DEFAULT_MAX_DOCUMENT_LENGTH = 128
DEFAULT_MAX_CROSS_LENGTH = 160
INIT_STD = 0.02
LAYER_NORM_EPS = 1e-12

# Optimizer
DEFAULT_LEARNING_RATE = 1e-3
ADAM_EPSILON = 1e-8
ADAM_BETAS = (0.9, 0.999)

# Retriever training
DEFAULT_BATCH_SIZE = 32
DEFAULT_ALPHA = 0.8
DEFAULT_GRAD_ACCUMULATION = 8
DEFAULT_RETRIEVER_STEPS = 300
DEFAULT_RETRIEVER_WARMUP = 30

# Re-ranker training
DEFAULT_NUM_NEGATIVES = 31
DEFAULT_WINDOW_START = 50
DEFAULT_WINDOW_END = 200
DEFAULT_RERANK_BATCH_SIZE = 8
DEFAULT_RERANKER_STEPS = 200
DEFAULT_RERANKER_WARMUP = 20

# Logging / checkpoints
DEFAULT_LOG_EVERY = 10
DEFAULT_CHECKPOINT_EVERY = 100  # steps; 0 disables periodic checkpoints

# Experiments
DEFAULT_SEED = 13

# Search / evaluation
DEFAULT_TOP_K = 100
DEFAULT_EVAL_KS = (10,)
DEFAULT_BM25_K1 = 1.2
DEFAULT_BM25_B = 0.75
RUN_TAG = 'medsearch'

# Click logs
DEFAULT_ZIPF_EXPONENT = 1.5
MAX_CLICKS = 1000

# Binary formats
CHECKPOINT_MAGIC = b'MCKP'
CHECKPOINT_VERSION = 1
INDEX_MAGIC = b'MEDV'
INDEX_VERSION = 1
DEFAULT_ENCODE_CHUNK_SIZE = 256

# Gradient checks
GRADCHECK_STEP = 1e-4
GRADCHECK_TOLERANCE = 1e-3
GRADCHECK_FLOOR = 1e-4
