"""Privacy-preserving face retrieval over an honest-but-curious cloud.

Inner-product-preserving split encryption (``aspe``) drives both secure
evaluation of a linear-threshold cascade detector (``cascade``) and encrypted
label-vector matching (``retrieval``); ``protocol`` wires the detector
vendor, the users and the cloud together.
"""
from .aspe import (AspeKey, EncDataVector, EncQueryVector, encrypt_data, encrypt_query, keygen,
                   secure_inner)

__version__ = "0.1.0"
