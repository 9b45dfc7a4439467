"""Visual speech recognition from mouth-region video frames.

The pipeline runs a two-stage PCA convolutional network over each frame, an
LSTM over the resulting histogram features, and a whole-word GMM-HMM
recognizer over tandem features built from the LSTM posteriors.
"""

__version__ = "0.1.0"
