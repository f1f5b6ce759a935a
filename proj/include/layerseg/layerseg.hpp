#pragma once

#include "layerseg/appearance.hpp"
#include "layerseg/binary_io.hpp"
#include "layerseg/chain.hpp"
#include "layerseg/config.hpp"
#include "layerseg/error.hpp"
#include "layerseg/evaluation.hpp"
#include "layerseg/glasso.hpp"
#include "layerseg/inference.hpp"
#include "layerseg/lowrank_gaussian.hpp"
#include "layerseg/model_file.hpp"
#include "layerseg/parallel.hpp"
#include "layerseg/posterior.hpp"
#include "layerseg/regularizer.hpp"
#include "layerseg/scan.hpp"
#include "layerseg/segmentation_file.hpp"
#include "layerseg/shape_prior.hpp"
#include "layerseg/synthdata.hpp"
