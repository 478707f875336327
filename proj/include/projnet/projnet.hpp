#pragma once

#include "projnet/cli.hpp"
#include "projnet/config.hpp"
#include "projnet/error.hpp"
#include "projnet/io.hpp"
#include "projnet/metrics.hpp"
#include "projnet/netbuild.hpp"
#include "projnet/ops.hpp"
#include "projnet/rng.hpp"
#include "projnet/shapes.hpp"
#include "projnet/synthdata.hpp"
#include "projnet/tensor.hpp"
#include "projnet/train.hpp"
