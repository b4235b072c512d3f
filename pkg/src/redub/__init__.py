"""Speech-conditioned masked video diffusion for lip re-dubbing.

The package is organised around a small set of pure tensor operations:

* ``diffusion``    - cosine schedule, masked noising, masked loss, DDIM
                     sampling and inversion with per-step background pinning
* ``conditioning`` - speech-unit quantisation, embedding, reference frames
* ``denoiser``     - factorised 3D U-Net noise predictor with per-frame FiLM
* ``stitching``    - overlapping-window averaging and sequential sections
* ``training``     - optimiser schedule, EMA, LSD / SRD training steps
* ``synthetic``    - procedural talking-blob corpus with measurement oracles
* ``metrics``      - identity and sync metrics plus report aggregation
* ``curation``     - pose / occlusion screening and clip corruption
* ``pipeline``     - end-to-end dubbing: invert, re-sample, refine
* ``cli``          - the ``redub`` command line front end

Video tensors are float32 ``[T, H, W, C]`` in ``[-1, 1]`` at 25 fps
throughout; masks are ``[T, H, W]`` with 1 marking editable pixels.
"""

__version__ = "0.1.0"
