#pragma once

// Umbrella header.
#include "psfm/bundle.hpp"
#include "psfm/config.hpp"
#include "psfm/dataset.hpp"
#include "psfm/depth_map.hpp"
#include "psfm/error.hpp"
#include "psfm/evalkit.hpp"
#include "psfm/geom.hpp"
#include "psfm/init.hpp"
#include "psfm/io.hpp"
#include "psfm/lm.hpp"
#include "psfm/p3p.hpp"
#include "psfm/parallel.hpp"
#include "psfm/pipeline.hpp"
#include "psfm/ransac_pnp.hpp"
#include "psfm/reconstruction.hpp"
#include "psfm/regopt.hpp"
#include "psfm/rng.hpp"
#include "psfm/synthgen.hpp"
#include "psfm/triangulation.hpp"
