"""Nitrogen prescription-map estimation from multispectral parcel rasters.

Subpackages follow the pipeline order: ``raster`` and ``synth`` produce
scenes, ``preprocess`` turns them into patches, ``autodiff``/``unet``/``train``
fit the encoder-decoder regressor, ``evaluate`` reconstructs and scores maps,
and ``green`` converts measured training energy into CO2-equivalent figures.
"""

__version__ = "0.1.0"
