#pragma once

#include "dgcrn/config.hpp"
#include "dgcrn/data.hpp"
#include "dgcrn/dgconv.hpp"
#include "dgcrn/dgcrm.hpp"
#include "dgcrn/dyngen.hpp"
#include "dgcrn/error.hpp"
#include "dgcrn/eval.hpp"
#include "dgcrn/gradcheck.hpp"
#include "dgcrn/graph_static.hpp"
#include "dgcrn/io.hpp"
#include "dgcrn/ops.hpp"
#include "dgcrn/synth.hpp"
#include "dgcrn/tensor.hpp"
#include "dgcrn/training.hpp"
#include "dgcrn/model_check.hpp"
#include "dgcrn/pipeline.hpp"
