"""crowdsplat: multi-person 3D Gaussian scenes with differentiable splat
rendering, procedural occlusion synthesis, image metrics, and pseudo-ground-
truth distillation."""

from .body_model import (
    BodyModelData,
    BodyParams,
    Mesh,
    load_body_model,
    posed_joints,
    projected_keypoints,
    regress_joints,
    skin,
)
from .cameras import Camera, CameraRig, hemisphere_rig, load_rig, orbit_rig, save_rig
from .distill import (
    ExternalRefiner,
    IdentityRefiner,
    OptimConfig,
    RefinementReport,
    Refiner,
    SclConfig,
    StepSizes,
    UnsharpRefiner,
    distill,
    generate_pseudo_gt,
    merge_meshes,
    scl_sample,
)
from .image import ImageBuffer, load_png, save_png
from .metrics import (
    ConvFeatureExtractor,
    FeatureExtractor,
    RefinerLossWeights,
    SelfDistillWeights,
    SsimConfig,
    feature_distance,
    gram_loss,
    optim_loss,
    psnr,
    refiner_loss,
    self_distill_loss,
    ssim,
    ssim_grad,
)
from .occlusion import (
    MaskSpec,
    OcclusionConfig,
    apply_mask,
    bezier_mask,
    ellipse_mask,
    line_cut_mask,
    mask_from_spec,
    morph_close,
    morph_dilate,
    synthesize_mask,
    union_from_spec,
)
from .renderer import (
    RenderConfig,
    RenderOutput,
    SceneGradients,
    render,
    render_backward,
    render_normal_map,
)
from .scene import (
    ClusterConfig,
    CrowdScene,
    Gaussian,
    PersonGaussians,
    assemble_scene,
    cluster_persons,
    init_gaussians_from_mesh,
)
from .scene_io import load_scene, save_scene
from .toy_body import toy_body_model, write_toy_body_model

__version__ = "0.1.0"
