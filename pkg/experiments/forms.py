"""
Forms that validate the sections of an experiment config file.
"""
from django import forms
from django.utils.translation import gettext_lazy as _

from topologies.kinds import TopologyKind
from training.config import DatasetKind


class StrictForm(forms.Form):
    """
    Form over a JSON section: keys it does not declare are errors, and
    optional fields left out stay out of ``section_data`` so the dataclass
    defaults apply.
    """

    def __init__(self, data, *args, **kwargs):
        self.raw_keys = set(data)
        super().__init__(data, *args, **kwargs)

    def clean(self):
        cleaned_data = super().clean()
        unknown = sorted(self.raw_keys - set(self.fields))
        if unknown:
            raise forms.ValidationError(_("Unknown keys: %(keys)s"), params={'keys': ', '.join(unknown)})
        return cleaned_data

    def section_data(self):
        return {
            name: value for name, value in self.cleaned_data.items()
            if name in self.raw_keys and value is not None
        }


class ModelConfigForm(StrictForm):
    """
    The ``model`` section: every ModelConfig field.
    """
    n_layers = forms.IntegerField(min_value=0)
    d_model = forms.IntegerField(min_value=1)
    n_heads = forms.IntegerField(min_value=1)
    vocab_size = forms.IntegerField(min_value=2)
    seq_len = forms.IntegerField(min_value=1)
    topology = forms.ChoiceField(choices=TopologyKind.choices(), required=False)
    ffn_mult = forms.IntegerField(min_value=1, required=False)
    embed_norm = forms.BooleanField(required=False)
    fused_input_norm = forms.BooleanField(required=False)
    depth_scaling = forms.BooleanField(required=False)
    qk_norm = forms.BooleanField(required=False)
    norm_eps = forms.FloatField(min_value=0.0, required=False)
    seed = forms.IntegerField(min_value=0, required=False)

    def clean(self):
        cleaned_data = super().clean()
        d_model = cleaned_data.get('d_model')
        n_heads = cleaned_data.get('n_heads')
        if d_model and n_heads and d_model % n_heads:
            raise forms.ValidationError(
                _("d_model (%(d)s) must be divisible by n_heads (%(h)s)."),
                params={'d': d_model, 'h': n_heads},
            )
        return cleaned_data


class DatasetForm(StrictForm):
    kind = forms.ChoiceField(choices=DatasetKind.choices())
    p = forms.IntegerField(min_value=2, required=False)
    alphabet = forms.IntegerField(min_value=1, required=False)
    length = forms.IntegerField(min_value=1, required=False)
    path = forms.CharField(required=False)
    n_examples = forms.IntegerField(min_value=1, required=False)
    eval_fraction = forms.FloatField(min_value=0.0, max_value=0.99, required=False)
    seed = forms.IntegerField(min_value=0, required=False)

    def section_data(self):
        data = super().section_data()
        if not data.get('path'):
            data.pop('path', None)
        return data


class TrainConfigForm(StrictForm):
    """
    The ``train`` section. ``dataset`` is validated by DatasetForm.
    """
    peak_lr = forms.FloatField()
    warmup_steps = forms.IntegerField(min_value=0)
    total_steps = forms.IntegerField(min_value=1)
    final_lr_factor = forms.FloatField(min_value=0.0, max_value=1.0, required=False)
    batch_size = forms.IntegerField(min_value=1, required=False)
    weight_decay = forms.FloatField(min_value=0.0, required=False)
    betas = forms.JSONField(required=False)
    adam_eps = forms.FloatField(required=False)
    clip_norm = forms.FloatField(min_value=0.0, required=False)
    spike_factor = forms.FloatField(required=False)
    dataset = forms.JSONField(required=False)
    eval_every = forms.IntegerField(min_value=1, required=False)
    seed = forms.IntegerField(min_value=0, required=False)
    exempt_norms_from_decay = forms.BooleanField(required=False)
    divergence_factor = forms.FloatField(required=False)
    divergence_patience = forms.IntegerField(min_value=1, required=False)
    spike_window = forms.IntegerField(min_value=1, required=False)

    def clean_peak_lr(self):
        peak_lr = self.cleaned_data.get('peak_lr')
        if peak_lr is not None and peak_lr <= 0:
            raise forms.ValidationError(_("peak_lr must be positive."))
        return peak_lr

    def clean_betas(self):
        betas = self.cleaned_data.get('betas')
        if betas is None:
            return None
        if not isinstance(betas, list) or len(betas) != 2 or not all(isinstance(b, (int, float)) for b in betas):
            raise forms.ValidationError(_("betas must be a list of two numbers."))
        return tuple(float(b) for b in betas)

    def clean_dataset(self):
        dataset = self.cleaned_data.get('dataset')
        if dataset is None:
            return None
        if not isinstance(dataset, dict):
            raise forms.ValidationError(_("dataset must be an object."))
        form = DatasetForm(dataset)
        if not form.is_valid():
            raise forms.ValidationError(form.errors.as_text())
        return form.section_data()

    def clean(self):
        cleaned_data = super().clean()
        warmup = cleaned_data.get('warmup_steps')
        total = cleaned_data.get('total_steps')
        if warmup is not None and total is not None and warmup >= total:
            raise forms.ValidationError(_("warmup_steps must be smaller than total_steps."))
        return cleaned_data
