#pragma once

#include "pmsm/common.hpp"
#include "pmsm/random.hpp"
#include "pmsm/image.hpp"
#include "pmsm/image_io.hpp"
#include "pmsm/dataset.hpp"
#include "pmsm/features.hpp"
#include "pmsm/mining.hpp"
#include "pmsm/loss.hpp"
#include "pmsm/embedding.hpp"
#include "pmsm/trainer.hpp"
#include "pmsm/eval.hpp"
#include "pmsm/config.hpp"
