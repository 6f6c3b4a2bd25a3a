#pragma once

#include "dlab/array.hpp"
#include "dlab/attacks.hpp"
#include "dlab/container.hpp"
#include "dlab/data.hpp"
#include "dlab/metrics.hpp"
#include "dlab/model.hpp"
#include "dlab/network.hpp"
#include "dlab/rng.hpp"
#include "dlab/runlog.hpp"
#include "dlab/surface.hpp"
#include "dlab/train.hpp"
