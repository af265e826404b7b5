"""Self-contrastive representation learning on synthetic point clouds.

Modules: ``geometry`` (shapes, sampling, patches, XYZ files), ``autodiff``
(reverse-mode tensors, Adam), ``encoders`` (EdgeConv, GCN aggregation,
pair discriminator), ``selfsim`` (patch similarity and hard-negative
mining), ``contrastive`` (InfoNCE training), ``evaluation`` (probes and
harnesses), ``config``/``pipeline``/``cli`` (run orchestration).
"""

__version__ = "0.1.0"
