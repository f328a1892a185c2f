"""Learning to predict labels together with their explanations from (X, Y, E) triples.

Submodules:

``dataset``      triple containers, CSV I/O, transforms, splits, discretisation
``tictactoe``    the labeled tic-tac-toe position corpus
``models``       numpy feed-forward nets with SGD, and sparse linear baselines
``pairloss``     pairwise cosine losses for shaping embeddings
``knn``          cosine kNN over embeddings with kernel-weighted predictions
``metrics``      accuracy / MAE scoring and report tables
``experiments``  end-to-end runs and artifacts; ``cli`` wraps them
"""

__version__ = "0.1.0"
