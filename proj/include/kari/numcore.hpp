#pragma once

#include "kari/numcore/grad_check.hpp"
#include "kari/numcore/ops.hpp"
#include "kari/numcore/tensor.hpp"
