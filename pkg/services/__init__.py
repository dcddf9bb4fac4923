from services.dataset import GeneratorSpec, PointCloud, generate, load_point_cloud, save_point_cloud
from services.gluing import ClosedFit, GlueJunction, build_junction, fit_closed, glue_eval, invert_chart, kappa
from services.hdmde import Waj, ZReport, em_theta, hdmde, kmeans_partition, z_statistic
from services.interior import GridLabels, agreement, classify_grid, naive_slice_interior, normal, orientation
from services.isomap import isomap
from services.pme import FitResult, PmeOptions, msd, pme_fit, select_lambda
from services.projection import ProjectionOptions, dist, project
from services.spline import SplineMap, assemble, solve
