#pragma once

#include "flowage/aging.hpp"
#include "flowage/checkpoint.hpp"
#include "flowage/config.hpp"
#include "flowage/container.hpp"
#include "flowage/error.hpp"
#include "flowage/field.hpp"
#include "flowage/flow.hpp"
#include "flowage/geometry.hpp"
#include "flowage/manifest.hpp"
#include "flowage/random.hpp"
#include "flowage/subspace.hpp"
#include "flowage/synth.hpp"
#include "flowage/training.hpp"
