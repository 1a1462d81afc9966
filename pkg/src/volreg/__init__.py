"""volreg: 3D deformable image registration toolkit and benchmark harness."""

from .models import (AffineTransform, FfdGrid, RegularizerWeights,
                     affine_to_displacement, bending_energy, diffusion_energy,
                     ffd_to_displacement, nmi_gradient_on_controls)
from .nifti import NiftiFormatError, VolumeHeader, load_header, load_volume, save_volume
from .optimize import (RegistrationConfig, RegistrationResult, multires_schedule,
                       register, register_affine, register_dense_diffeomorphic,
                       register_ffd, register_voxelmorph_energy)
from .similarity import (JointHistogram, SimilarityReport, cc_global,
                         joint_histogram, local_cc, mi, msd, nmi,
                         objective_gradient, objective_value, similarity_report)
from .syngen import (DatasetManifest, DeformationSpec, build_manifest,
                     generate_deformation, materialize)
from .volume import Volume3, downscale, flip, make_phantom
from .warp import (DisplacementField3, VelocityField3, apply_displacement,
                   compose, exp_velocity, jacobian_determinant, load_field,
                   resize_field, sample_trilinear, save_field)

__version__ = "0.1.0"
