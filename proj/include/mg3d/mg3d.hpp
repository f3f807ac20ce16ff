#pragma once

#include "mg3d/errors.hpp"
#include "mg3d/numerics.hpp"
#include "mg3d/random.hpp"
#include "mg3d/nn.hpp"
#include "mg3d/text.hpp"
#include "mg3d/vision.hpp"
#include "mg3d/fusion.hpp"
#include "mg3d/objectives.hpp"
#include "mg3d/model.hpp"
#include "mg3d/optim.hpp"
#include "mg3d/checkpoint.hpp"
#include "mg3d/corpus.hpp"
#include "mg3d/train.hpp"
#include "mg3d/eval.hpp"
