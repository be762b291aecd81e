#pragma once

#include "fcvit/tensor.hpp"
#include "fcvit/autograd.hpp"
#include "fcvit/ops.hpp"
#include "fcvit/random.hpp"
#include "fcvit/gradcheck.hpp"
#include "fcvit/block.hpp"
#include "fcvit/model.hpp"
#include "fcvit/config_json.hpp"
#include "fcvit/io.hpp"
#include "fcvit/analysis.hpp"
#include "fcvit/toy.hpp"
