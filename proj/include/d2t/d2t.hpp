#pragma once

#include "d2t/coarse_init.hpp"
#include "d2t/core_geometry.hpp"
#include "d2t/depth_align.hpp"
#include "d2t/errors.hpp"
#include "d2t/eval.hpp"
#include "d2t/image_io.hpp"
#include "d2t/optimizer.hpp"
#include "d2t/pipeline.hpp"
#include "d2t/scene_io.hpp"
#include "d2t/splat_renderer.hpp"
#include "d2t/ssim.hpp"
#include "d2t/synthetic.hpp"
#include "d2t/view_synthesis.hpp"
